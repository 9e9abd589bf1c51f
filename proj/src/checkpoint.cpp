#include "unidiff/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "unidiff/errors.hpp"

namespace unidiff {

using nlohmann::json;
using nn::Tensor;

namespace {

constexpr char kMagic[8] = {'U', 'D', 'F', 'C', 'K', 'P', 'T', '\0'};

struct Section {
  std::string name;
  const Tensor* tensor;
};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  const DenoiserModel& m = ckpt.model;
  std::vector<Section> sections;
  for (const auto& [name, p] : m.trunk_parameters()) sections.push_back({"trunk/" + name, p});
  sections.push_back({"null_embed", &m.null_embed()});
  for (const auto& [name, v] : m.concepts().tokens()) {
    sections.push_back({"concepts/token/" + name, &v});
  }
  for (const auto& [name, v] : m.concepts().suffixes()) {
    sections.push_back({"concepts/suffix/" + name, &v});
  }
  json alphas = json::object();
  for (const auto& [layer, a] : m.adapters()) {
    sections.push_back({"adapters/" + layer + "/down", &a.down});
    sections.push_back({"adapters/" + layer + "/up", &a.up});
    alphas[layer] = a.alpha;
  }

  const DenoiserArch& arch = m.arch();
  json table = json::array();
  for (const auto& s : sections) table.push_back({{"name", s.name}, {"shape", s.tensor->shape()}});
  json header{{"arch",
               {{"image_dim", arch.image_dim},
                {"hidden", arch.hidden},
                {"depth", arch.depth},
                {"cond_dim", arch.cond_dim},
                {"time_dim", arch.time_dim}}},
              {"schedule",
               {{"steps", ckpt.schedule.steps},
                {"beta_start", ckpt.schedule.beta_start},
                {"beta_end", ckpt.schedule.beta_end}}},
              {"lineage", ckpt.lineage},
              {"adapter_alpha", alphas},
              {"sections", table}};
  const std::string h = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, h.size());
  out += h;
  for (const auto& s : sections) {
    out.append(reinterpret_cast<const char*>(s.tensor->data()), s.tensor->size() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  std::size_t pos = sizeof kMagic;
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint format_version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  }
  const auto hlen = get<std::uint64_t>(bytes, pos);
  if (hlen > bytes.size() - pos) throw FormatError("checkpoint header length exceeds file");
  json header;
  try {
    header = json::parse(bytes.substr(pos, hlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
  }
  pos += hlen;

  try {
    const json& a = header.at("arch");
    DenoiserArch arch;
    arch.image_dim = a.at("image_dim");
    arch.hidden = a.at("hidden");
    arch.depth = a.at("depth");
    arch.cond_dim = a.at("cond_dim");
    arch.time_dim = a.at("time_dim");
    Checkpoint ck{DenoiserModel(arch), {}, {}};
    const json& s = header.at("schedule");
    ck.schedule = make_linear_schedule(s.at("steps"), s.at("beta_start"), s.at("beta_end"));
    ck.lineage = header.at("lineage").get<std::map<std::string, std::uint64_t>>();

    std::map<std::string, Tensor*> trunk;
    for (auto& [name, p] : ck.model.trunk_parameters()) trunk["trunk/" + name] = p;
    nn::AdapterSet adapters;
    for (const auto& [layer, alpha] : header.at("adapter_alpha").items()) {
      adapters[layer].alpha = alpha.get<double>();
    }

    for (const auto& entry : header.at("sections")) {
      const std::string name = entry.at("name");
      Tensor t(entry.at("shape").get<nn::Shape>());
      const std::size_t nbytes = t.size() * sizeof(double);
      if (nbytes > bytes.size() - pos) throw FormatError("checkpoint section '" + name + "' truncated");
      std::memcpy(t.data(), bytes.data() + pos, nbytes);
      pos += nbytes;

      if (auto it = trunk.find(name); it != trunk.end()) {
        if (it->second->shape() != t.shape()) throw FormatError("section '" + name + "' shape mismatch");
        *it->second = std::move(t);
      } else if (name == "null_embed") {
        ck.model.null_embed() = std::move(t);
      } else if (name.rfind("concepts/token/", 0) == 0) {
        ck.model.concepts().set_token(name.substr(15), std::move(t));
      } else if (name.rfind("concepts/suffix/", 0) == 0) {
        ck.model.concepts().set_suffix(name.substr(16), std::move(t));
      } else if (name.rfind("adapters/", 0) == 0) {
        const auto slash = name.rfind('/');
        const std::string layer = name.substr(9, slash - 9);
        const std::string part = name.substr(slash + 1);
        auto it2 = adapters.find(layer);
        if (it2 == adapters.end()) throw FormatError("adapter section without alpha: " + name);
        if (part == "down") {
          it2->second.down = std::move(t);
        } else if (part == "up") {
          it2->second.up = std::move(t);
        } else {
          throw FormatError("unknown adapter section '" + name + "'");
        }
      } else {
        throw FormatError("unknown checkpoint section '" + name + "'");
      }
    }
    if (pos != bytes.size()) throw FormatError("trailing bytes after checkpoint sections");
    if (!adapters.empty()) ck.model.attach_adapters(std::move(adapters));
    return ck;
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
  } catch (const ParameterError& e) {
    throw FormatError(std::string("inconsistent checkpoint: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("inconsistent checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace unidiff
