#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "unidiff/rng.hpp"
#include "unidiff/tensor.hpp"

namespace unidiff {

// Suffix vocabulary. Background descriptors annotate every generated image;
// tone descriptors never annotate target data and act as the "imagined"
// suffixes and style edits.
inline const std::vector<std::string> kBackgroundSuffixes = {"bg-plain", "bg-gradient",
                                                             "bg-cluttered"};
inline const std::vector<std::string> kToneSuffixes = {"tone-dark", "tone-bright", "tone-warm"};

enum class BackgroundMode { plain, cluttered, mixed };

struct ShapeSpec {
  int families = 4;
  int variants = 3;
  int train_per_class = 20;
  std::vector<int> train_counts;  // optional per fine class override (long-tail specs)
  int test_per_class = 50;
  int image_size = 16;
  double noise = 0.03;
  BackgroundMode background = BackgroundMode::mixed;
  bool random_tones = false;  // tone variation, used for backbone corpora
  double hue_step = 0.035;
  double stripe_amplitude = 0.12;
};

struct SampleProvenance {
  bool synthetic = false;
  std::string method = "real";
  std::vector<std::string> source_ids;
  double strength = 0.0;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> extra;

  friend bool operator==(const SampleProvenance&, const SampleProvenance&) = default;
};

struct LabeledSample {
  std::string id;
  nn::Tensor image;  // H x W x C in [0, 1]
  int fine = 0;
  int coarse = 0;
  std::string annotation;  // descriptive suffix attached to the image, may be empty
  SampleProvenance provenance;

  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

struct Hierarchy {
  std::vector<std::string> coarse_names;
  std::vector<std::string> fine_names;
  std::vector<int> fine_to_coarse;

  std::size_t num_fine() const { return fine_names.size(); }
  std::size_t num_coarse() const { return coarse_names.size(); }
  friend bool operator==(const Hierarchy&, const Hierarchy&) = default;
};

struct DatasetManifest {
  Hierarchy hierarchy;
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
  std::uint64_t seed = 0;
  std::string spec_hash;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

std::vector<std::string> family_names();
std::string spec_hash(const ShapeSpec& spec);

// Renders one image of (family, variant). Returns the image and its background suffix.
nn::Tensor render_shape(const ShapeSpec& spec, int family, int variant, Rng& rng,
                        std::string* annotation = nullptr, std::string* tone = nullptr);

// Balanced synthetic dataset; fine class = family x variant, coarse = family.
DatasetManifest generate_shapes(const ShapeSpec& spec, std::uint64_t seed);

// Exactly k training samples per fine class, drawn without replacement.
DatasetManifest kshot_subset(const DatasetManifest& manifest, int k, std::uint64_t seed);

// Keeps ceil(fraction * n_c) training samples per class. Subsets for the same
// seed are nested across fractions.
DatasetManifest fraction_subset(const DatasetManifest& manifest, double fraction,
                                std::uint64_t seed);

// Relabels every sample with its coarse class and replaces the class table by the coarse one.
DatasetManifest relabel_to_coarse(const DatasetManifest& manifest);

// Storage [0, 1] <-> model [-1, 1]. Storage values live on a 2^-16 grid, on
// which the conversion is an exact involution.
double quantize_storage(double v);
nn::Tensor to_model_space(const nn::Tensor& image);  // flattened
nn::Tensor to_storage_space(const nn::Tensor& flat, const nn::Shape& image_shape);

// Manifest directory: manifest.json plus arrays/<id>.npy.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir);
DatasetManifest load_manifest(const std::filesystem::path& dir);
std::string manifest_hash(const DatasetManifest& manifest);

std::vector<int> class_counts(const std::vector<LabeledSample>& samples, std::size_t num_classes);

}  // namespace unidiff
