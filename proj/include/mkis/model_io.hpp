#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "mkis/model.hpp"

namespace mkis {

// Model file layout (all integers little-endian):
//   magic "MKIS" | format version u32 | config block | record count u32 |
//   records. Each record: name (u16 length + bytes) | dtype u8 (0 = f32,
//   1 = f64) | kind u8 (0 = parameter, 1 = running stat, 2 = extra) |
//   ndim u8 | dims i64 each | crc32 u32 of the payload | payload.
// Extras carry training state (optimizer moments, step counters) in
// checkpoints; load_model skips them, load_model_full returns them.

inline constexpr uint32_t kModelFormatVersion = 1;

template <typename T>
using ExtraRecordsT = std::vector<std::pair<std::string, std::vector<T>>>;

template <typename T>
void save_model(ModelT<T>& model, std::ostream& os, const ExtraRecordsT<T>& extras = {});

template <typename T>
void save_model(ModelT<T>& model, const std::string& path, const ExtraRecordsT<T>& extras = {});

template <typename T>
struct LoadedModelT {
  ModelT<T> model;
  ExtraRecordsT<T> extras;
};

// Reads a model file, converting stored payloads to T if they were written
// at the other precision. Throws FormatVersionError / ChecksumError /
// TruncatedFileError / IoError as appropriate; never returns a partially
// filled model.
template <typename T>
LoadedModelT<T> load_model_full(std::istream& is);

template <typename T>
LoadedModelT<T> load_model_full(const std::string& path);

template <typename T>
ModelT<T> load_model(const std::string& path);

// Byte size of the 32-bit serialization of a freshly built model (parameter
// values do not change the size).
int64_t serialized_size(const ModelConfig& config);

// complexity_report plus the serialized model size.
ComplexityReport analyze_complexity(const ModelConfig& config, int64_t height, int64_t width_px);

}  // namespace mkis
