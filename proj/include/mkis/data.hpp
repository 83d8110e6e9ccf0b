#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mkis/bytemap.hpp"
#include "mkis/image_io.hpp"
#include "mkis/tensor.hpp"

namespace mkis {

// One training/evaluation unit: image in [0,1], strictly binary label, and
// an optional field-of-view mask (0 = excluded from loss and metrics).
struct Sample {
  std::string id;
  ImageF image;
  ByteMap label;
  std::optional<ByteMap> fov_mask;

  // Throws DataError unless shapes agree, the label is binary, and every
  // image value is finite and inside [0,1].
  void validate() const;
};

struct ManifestRecord {
  std::string id;
  std::string image_path;
  std::string label_path;
  std::string mask_path;  // empty when absent
  int line = 0;
};

struct DatasetManifest {
  std::string name;
  std::string split;  // "train" or "test"
  bool resize = false;
  int64_t resize_h = 0;
  int64_t resize_w = 0;
  std::vector<ManifestRecord> records;
};

// Line-oriented manifest: '#' comments, a header line
// `dataset=<name> split=<train|test> resize=<native|HxW>`, then records
// `id <tab> image_path <tab> label_path [<tab> mask_path]`. Relative paths
// resolve against the manifest's directory; every referenced file must
// exist and ids must be unique. Errors name the offending line.
DatasetManifest load_manifest(const std::string& path);

// Decodes one record into a validated Sample, applying channel replication
// (grayscale to in_channels) and the manifest's resize policy (bilinear for
// the image, nearest-neighbor for label and mask).
Sample load_sample(const DatasetManifest& manifest, size_t index, int in_channels);

// raw > threshold becomes 1. Multi-channel input is accepted only when all
// channels agree on every pixel.
ByteMap binarize_label(const ImageF& raw, double threshold = 0.5);

ImageF resize_bilinear(const ImageF& src, int64_t out_h, int64_t out_w);
ByteMap resize_nearest(const ByteMap& src, int64_t out_h, int64_t out_w);

// Rotates counterclockwise about the canvas center, keeping the canvas
// size: bilinear with zero fill for the image, nearest-neighbor for label
// and mask. Multiples of 90 degrees take an exact permutation path.
Sample rotate_sample(const Sample& sample, double degrees);

// image <- clamp(gain * image, 0, 1); label and mask untouched. gain > 0.
Sample adjust_brightness(const Sample& sample, double gain);

// ---- Sample sources ---------------------------------------------------------

// Random access to a logical sequence of samples. get(i) is a pure function
// of the index, so any prefix/suffix/order of evaluation yields identical
// samples; implementations may cache internally.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual int64_t size() const = 0;
  virtual Sample get(int64_t index) = 0;
};

class VectorSource : public SampleSource {
 public:
  explicit VectorSource(std::vector<Sample> samples) : samples_(std::move(samples)) {}
  int64_t size() const override { return int64_t(samples_.size()); }
  Sample get(int64_t index) override { return samples_.at(size_t(index)); }

 private:
  std::vector<Sample> samples_;
};

// Decodes manifest records on demand.
class ManifestSource : public SampleSource {
 public:
  ManifestSource(DatasetManifest manifest, int in_channels)
      : manifest_(std::move(manifest)), in_channels_(in_channels) {}
  int64_t size() const override { return int64_t(manifest_.records.size()); }
  Sample get(int64_t index) override {
    return load_sample(manifest_, size_t(index), in_channels_);
  }
  const DatasetManifest& manifest() const { return manifest_; }

 private:
  DatasetManifest manifest_;
  int in_channels_;
};

struct AugmentConfig {
  int rotations = 360;           // one-degree steps 0..rotations-1
  int brightness_variants = 20;  // random gains applied to the unrotated image
  double gain_lo = 0.7;
  double gain_hi = 1.3;
  // gains inside this dead zone are rejected so every variant differs
  double dead_lo = 0.98;
  double dead_hi = 1.02;
};

// Lazily expands a base source: for source sample j, indices
// j*(rotations+variants) .. cover rotations 0..rotations-1 degrees followed
// by the brightness variants. Gains are a pure function of (seed, j, v).
class AugmentStream : public SampleSource {
 public:
  AugmentStream(std::shared_ptr<SampleSource> base, AugmentConfig config, uint64_t seed);
  int64_t size() const override;
  Sample get(int64_t index) override;
  double gain_for(int64_t source_index, int variant) const;
  int per_source() const { return config_.rotations + config_.brightness_variants; }

 private:
  std::shared_ptr<SampleSource> base_;
  AugmentConfig config_;
  uint64_t seed_;
  int64_t cached_index_ = -1;  // last base sample fetched (pure-function cache)
  Sample cached_;
};

// ---- Geometry normalization --------------------------------------------------

struct CropRecord {
  int64_t orig_h = 0;
  int64_t orig_w = 0;
  int64_t pad_bottom = 0;
  int64_t pad_right = 0;
  bool padded() const { return pad_bottom > 0 || pad_right > 0; }
};

// Pads bottom/right to the next multiples: image by edge reflection, label
// and mask with zeros (zero mask = excluded, so padding never leaks into
// loss or metrics). The crop record inverts the padding exactly.
Sample pad_to_multiple(const Sample& sample, int64_t multiple, CropRecord* record);

ByteMap crop_map(const ByteMap& padded, const CropRecord& record);
std::vector<float> crop_plane(const std::vector<float>& padded, int64_t padded_h,
                              int64_t padded_w, const CropRecord& record);

// Stacks equally-shaped samples into a BxCxHxW tensor (CHW per sample).
template <typename T>
TensorT<T> batch_tensor(const std::vector<const Sample*>& samples);

}  // namespace mkis
