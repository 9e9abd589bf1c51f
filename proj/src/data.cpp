#include "unidiff/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "unidiff/errors.hpp"
#include "unidiff/npy.hpp"

namespace unidiff {

using nlohmann::json;
using nn::Tensor;

namespace {

constexpr int kFormatVersion = 1;
constexpr double kQuant = 65536.0;

std::vector<std::string> all_families() {
  return {"disk", "square", "triangle", "cross", "ring", "bar"};
}

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

// Signed distance (pixels) from the shape boundary; negative inside.
double shape_sdf(int family, double px, double py, double r) {
  switch (family) {
    case 0:
      return std::hypot(px, py) - r;
    case 1:
      return std::max(std::abs(px), std::abs(py)) - 0.8 * r;
    case 2: {
      double d = -1e9;
      for (int k = 0; k < 3; ++k) {
        const double a = std::numbers::pi / 2 + k * 2 * std::numbers::pi / 3;
        d = std::max(d, px * std::cos(a) + py * std::sin(a));
      }
      return d - 0.5 * r;
    }
    case 3: {
      const double a = std::max(std::abs(px) - r, std::abs(py) - 0.33 * r);
      const double b = std::max(std::abs(py) - r, std::abs(px) - 0.33 * r);
      return std::min(a, b);
    }
    case 4:
      return std::abs(std::hypot(px, py) - 0.72 * r) - 0.28 * r;
    default: {
      const double q = std::hypot(px / r, py / (0.45 * r));
      return (q - 1.0) * 0.45 * r;
    }
  }
}

json provenance_to_json(const SampleProvenance& p) {
  return json{{"kind", p.synthetic ? "synthetic" : "real"},
              {"method", p.method},
              {"source_ids", p.source_ids},
              {"strength", p.strength},
              {"seed", p.seed},
              {"extra", p.extra}};
}

SampleProvenance provenance_from_json(const json& j) {
  SampleProvenance p;
  const std::string kind = j.at("kind");
  if (kind != "real" && kind != "synthetic") throw FormatError("unknown provenance kind " + kind);
  p.synthetic = kind == "synthetic";
  p.method = j.at("method");
  p.source_ids = j.at("source_ids").get<std::vector<std::string>>();
  p.strength = j.at("strength");
  p.seed = j.at("seed");
  p.extra = j.at("extra").get<std::map<std::string, std::string>>();
  return p;
}

}  // namespace

std::vector<std::string> family_names() { return all_families(); }

std::string spec_hash(const ShapeSpec& s) {
  json j{{"families", s.families},        {"variants", s.variants},
         {"train_per_class", s.train_per_class}, {"train_counts", s.train_counts},
         {"test_per_class", s.test_per_class},   {"image_size", s.image_size},
         {"noise", s.noise},               {"background", static_cast<int>(s.background)},
         {"random_tones", s.random_tones}, {"hue_step", s.hue_step},
         {"stripe_amplitude", s.stripe_amplitude}};
  std::ostringstream os;
  os << std::hex << fnv1a64(j.dump());
  return os.str();
}

Tensor render_shape(const ShapeSpec& spec, int family, int variant, Rng& rng,
                    std::string* annotation, std::string* tone) {
  const int n = spec.image_size;
  const double unit = n / 16.0;
  Tensor img({static_cast<std::size_t>(n), static_cast<std::size_t>(n), 3});

  // Background.
  int bg_kind = 0;
  if (spec.background == BackgroundMode::cluttered) bg_kind = 2;
  if (spec.background == BackgroundMode::mixed) bg_kind = static_cast<int>(rng.index(3));
  const double base = rng.uniform(0.1, 0.45);
  double tint[3];
  for (double& t : tint) t = rng.uniform(-0.03, 0.03);
  const double gdir = rng.uniform(0.0, 2 * std::numbers::pi);
  const double gamp = rng.uniform(0.1, 0.25);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double level = base;
      if (bg_kind == 1) {
        const double u = ((x + 0.5) / n - 0.5) * std::cos(gdir) + ((y + 0.5) / n - 0.5) * std::sin(gdir);
        level += gamp * u * 2.0;
      }
      for (int c = 0; c < 3; ++c) img[(y * n + x) * 3 + c] = level + tint[c];
    }
  }
  if (bg_kind == 2) {
    const int blobs = 3 + static_cast<int>(rng.index(3));
    for (int b = 0; b < blobs; ++b) {
      const double bx = rng.uniform(0, n), by = rng.uniform(0, n);
      const double br = rng.uniform(1.0, 2.5) * unit;
      double col[3];
      for (double& c : col) c = rng.uniform(-0.15, 0.15);
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
          if (std::hypot(x + 0.5 - bx, y + 0.5 - by) < br)
            for (int c = 0; c < 3; ++c) img[(y * n + x) * 3 + c] += col[c];
    }
  }
  if (annotation) *annotation = kBackgroundSuffixes[static_cast<std::size_t>(bg_kind)];

  // Foreground: family sets the geometry, variant sets hue and stripe frequency.
  const double cx = n / 2.0 + rng.uniform(-1.25, 1.25) * unit;
  const double cy = n / 2.0 + rng.uniform(-1.25, 1.25) * unit;
  const double radius = rng.uniform(4.0, 5.3) * unit;
  const double theta = rng.uniform(-0.45, 0.45);
  const double hue = 0.08 + variant * spec.hue_step + 0.01 * rng.normal();
  double rgb[3];
  hsv_to_rgb(hue, rng.uniform(0.7, 0.8), rng.uniform(0.78, 0.92), rgb);
  const double freq = (1.0 + variant) / (2.0 * radius);
  const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
  const double ct = std::cos(theta), st = std::sin(theta);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double px = ct * dx + st * dy, py = -st * dx + ct * dy;
      const double cover = std::clamp(0.5 - shape_sdf(family, px, py, radius), 0.0, 1.0);
      if (cover <= 0.0) continue;
      const double stripe =
          1.0 + spec.stripe_amplitude * std::sin(2 * std::numbers::pi * freq * dx + phase);
      for (int c = 0; c < 3; ++c) {
        double& p = img[(y * n + x) * 3 + c];
        p = (1.0 - cover) * p + cover * rgb[c] * stripe;
      }
    }
  }

  int tone_kind = -1;
  if (spec.random_tones) {
    tone_kind = static_cast<int>(rng.index(6)) - 3;
    for (std::size_t i = 0; i < img.size(); ++i) {
      double& p = img[i];
      if (tone_kind == 0) p *= 0.6;
      if (tone_kind == 1) p = 0.35 + 0.65 * p;
      if (tone_kind == 2) p += (i % 3 == 0) ? 0.12 : (i % 3 == 2 ? -0.12 : 0.0);
    }
  }
  if (tone) *tone = tone_kind >= 0 ? kToneSuffixes[static_cast<std::size_t>(tone_kind)] : "";

  for (double& p : img.storage()) p = quantize_storage(p + spec.noise * rng.normal());
  return img;
}

DatasetManifest generate_shapes(const ShapeSpec& spec, std::uint64_t seed) {
  if (spec.families < 1 || spec.variants < 1) {
    throw ParameterError("shape spec needs at least one family and one variant");
  }
  if (spec.families > static_cast<int>(all_families().size())) {
    throw ParameterError("at most " + std::to_string(all_families().size()) + " shape families");
  }
  if (spec.image_size < 8) throw ParameterError("image size must be >= 8");
  const int classes = spec.families * spec.variants;
  if (!spec.train_counts.empty() && static_cast<int>(spec.train_counts.size()) != classes) {
    throw ParameterError("train_counts needs one entry per fine class");
  }
  if (spec.train_counts.empty() && spec.train_per_class < 1) {
    throw ParameterError("train_per_class must be >= 1");
  }
  if (spec.test_per_class < 0) throw ParameterError("test_per_class must be >= 0");

  DatasetManifest m;
  m.seed = seed;
  m.spec_hash = spec_hash(spec);
  const auto names = all_families();
  for (int f = 0; f < spec.families; ++f) m.hierarchy.coarse_names.push_back(names[f]);
  for (int f = 0; f < spec.families; ++f) {
    for (int v = 0; v < spec.variants; ++v) {
      m.hierarchy.fine_names.push_back(names[f] + "/v" + std::to_string(v));
      m.hierarchy.fine_to_coarse.push_back(f);
    }
  }

  auto make_split = [&](bool train, std::vector<LabeledSample>& out) {
    std::size_t counter = 0;
    for (int c = 0; c < classes; ++c) {
      const int count = train ? (spec.train_counts.empty() ? spec.train_per_class
                                                           : spec.train_counts[c])
                              : spec.test_per_class;
      if (count < 0) throw ParameterError("negative class count");
      for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, {train ? 1u : 2u, static_cast<std::uint64_t>(c),
                                   static_cast<std::uint64_t>(i)}));
        LabeledSample s;
        char id[32];
        std::snprintf(id, sizeof id, "%s%05zu", train ? "tr" : "te", counter++);
        s.id = id;
        s.fine = c;
        s.coarse = c / spec.variants;
        std::string tone;
        s.image = render_shape(spec, s.coarse, c % spec.variants, rng, &s.annotation, &tone);
        s.provenance.seed = seed;
        if (!tone.empty()) s.provenance.extra["tone"] = tone;
        out.push_back(std::move(s));
      }
    }
  };
  make_split(true, m.train);
  make_split(false, m.test);
  return m;
}

std::vector<int> class_counts(const std::vector<LabeledSample>& samples, std::size_t num_classes) {
  std::vector<int> counts(num_classes, 0);
  for (const auto& s : samples) {
    if (s.fine < 0 || static_cast<std::size_t>(s.fine) >= num_classes) {
      throw ParameterError("label " + std::to_string(s.fine) + " outside class table");
    }
    ++counts[static_cast<std::size_t>(s.fine)];
  }
  return counts;
}

namespace {

// Per-class index lists in a seed-determined order.
std::vector<std::vector<std::size_t>> shuffled_by_class(const DatasetManifest& m,
                                                         std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(m.hierarchy.num_fine());
  for (std::size_t i = 0; i < m.train.size(); ++i) {
    by_class.at(static_cast<std::size_t>(m.train[i].fine)).push_back(i);
  }
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(c)}));
    auto& v = by_class[c];
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
  }
  return by_class;
}

DatasetManifest keep_train(const DatasetManifest& m, std::vector<std::size_t> keep) {
  std::sort(keep.begin(), keep.end());
  DatasetManifest out = m;
  out.train.clear();
  for (std::size_t i : keep) out.train.push_back(m.train[i]);
  return out;
}

}  // namespace

DatasetManifest kshot_subset(const DatasetManifest& manifest, int k, std::uint64_t seed) {
  if (k < 1) throw ParameterError("k-shot subset needs k >= 1");
  auto by_class = shuffled_by_class(manifest, seed);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (static_cast<int>(by_class[c].size()) < k) {
      throw ParameterError("class '" + manifest.hierarchy.fine_names[c] + "' has only " +
                           std::to_string(by_class[c].size()) + " samples, " +
                           std::to_string(k) + " requested");
    }
    keep.insert(keep.end(), by_class[c].begin(), by_class[c].begin() + k);
  }
  return keep_train(manifest, std::move(keep));
}

DatasetManifest fraction_subset(const DatasetManifest& manifest, double fraction,
                                std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ParameterError("real-data fraction must lie in (0, 1]");
  }
  auto by_class = shuffled_by_class(manifest, seed);
  std::vector<std::size_t> keep;
  for (auto& v : by_class) {
    const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(v.size()) - 1e-9));
    keep.insert(keep.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size())));
  }
  return keep_train(manifest, std::move(keep));
}

DatasetManifest relabel_to_coarse(const DatasetManifest& manifest) {
  DatasetManifest out = manifest;
  out.hierarchy.fine_names = manifest.hierarchy.coarse_names;
  out.hierarchy.fine_to_coarse.clear();
  for (std::size_t i = 0; i < manifest.hierarchy.num_coarse(); ++i) {
    out.hierarchy.fine_to_coarse.push_back(static_cast<int>(i));
  }
  for (auto* split : {&out.train, &out.test})
    for (auto& s : *split) s.fine = s.coarse;
  return out;
}

double quantize_storage(double v) {
  return std::round(std::clamp(v, 0.0, 1.0) * kQuant) / kQuant;
}

Tensor to_model_space(const Tensor& image) {
  Tensor out({image.size()});
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = 2.0 * image[i] - 1.0;
  return out;
}

Tensor to_storage_space(const Tensor& flat, const nn::Shape& image_shape) {
  Tensor out(image_shape);
  if (out.size() != flat.size()) throw ShapeError("to_storage_space: size mismatch");
  for (std::size_t i = 0; i < flat.size(); ++i) out[i] = quantize_storage((flat[i] + 1.0) / 2.0);
  return out;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "arrays", ec);
  if (ec) throw IoError("cannot create " + (dir / "arrays").string() + ": " + ec.message());
  json samples = json::array();
  auto add = [&](const LabeledSample& s, const char* split) {
    const std::string file = "arrays/" + s.id + ".npy";
    write_npy(dir / file, s.image);
    samples.push_back(json{{"id", s.id},
                           {"file", file},
                           {"split", split},
                           {"fine", s.fine},
                           {"coarse", s.coarse},
                           {"annotation", s.annotation},
                           {"provenance", provenance_to_json(s.provenance)}});
  };
  for (const auto& s : m.train) add(s, "train");
  for (const auto& s : m.test) add(s, "test");
  json j{{"format_version", kFormatVersion},
         {"seed", m.seed},
         {"spec_hash", m.spec_hash},
         {"hierarchy",
          {{"coarse", m.hierarchy.coarse_names},
           {"fine", m.hierarchy.fine_names},
           {"fine_to_coarse", m.hierarchy.fine_to_coarse}}},
         {"samples", samples}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << j.dump(1) << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot read " + (dir / "manifest.json").string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  try {
    if (j.at("format_version") != kFormatVersion) {
      throw FormatError("manifest format_version " + j.at("format_version").dump() +
                        " unsupported");
    }
    DatasetManifest m;
    m.seed = j.at("seed");
    m.spec_hash = j.at("spec_hash");
    m.hierarchy.coarse_names = j.at("hierarchy").at("coarse").get<std::vector<std::string>>();
    m.hierarchy.fine_names = j.at("hierarchy").at("fine").get<std::vector<std::string>>();
    m.hierarchy.fine_to_coarse = j.at("hierarchy").at("fine_to_coarse").get<std::vector<int>>();
    for (const auto& e : j.at("samples")) {
      LabeledSample s;
      s.id = e.at("id");
      s.fine = e.at("fine");
      s.coarse = e.at("coarse");
      s.annotation = e.at("annotation");
      s.provenance = provenance_from_json(e.at("provenance"));
      const std::string file = e.at("file");
      if (!std::filesystem::exists(dir / file)) throw IoError("missing array file " + file);
      s.image = read_npy(dir / file);
      const std::string split = e.at("split");
      if (split == "train") {
        m.train.push_back(std::move(s));
      } else if (split == "test") {
        m.test.push_back(std::move(s));
      } else {
        throw FormatError("unknown split '" + split + "'");
      }
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
}

std::string manifest_hash(const DatasetManifest& m) {
  std::uint64_t h = fnv1a64(m.spec_hash);
  auto mix = [&](std::string_view bytes) { h = splitmix64(h ^ fnv1a64(bytes)); };
  for (const auto* split : {&m.train, &m.test}) {
    for (const auto& s : *split) {
      mix(s.id);
      mix(provenance_to_json(s.provenance).dump() + std::to_string(s.fine) + "/" +
          std::to_string(s.coarse) + s.annotation);
      mix(std::string_view(reinterpret_cast<const char*>(s.image.data()),
                           s.image.size() * sizeof(double)));
    }
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace unidiff
