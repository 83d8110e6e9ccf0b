#include "mkis/model_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "mkis/error.hpp"

namespace mkis {

namespace {

constexpr char kMagic[4] = {'M', 'K', 'I', 'S'};
constexpr int64_t kMaxTensorElems = int64_t(1) << 30;  // corruption guard

template <typename U>
void write_le(std::ostream& os, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char buf[sizeof(U)];
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(buf, &value, sizeof(U));
  } else {
    std::memcpy(buf, &value, sizeof(U));
    for (size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(buf[i], buf[sizeof(U) - 1 - i]);
  }
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(std::istream& is, const char* what) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U)))
    throw TruncatedFileError(std::string("model file truncated while reading ") + what);
  if constexpr (std::endian::native != std::endian::little)
    for (size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(buf[i], buf[sizeof(U) - 1 - i]);
  U value;
  std::memcpy(&value, buf, sizeof(U));
  return value;
}

void write_string(std::ostream& os, const std::string& s) {
  if (s.size() > std::numeric_limits<uint16_t>::max())
    throw IoError("tensor name too long: " + s.substr(0, 64));
  write_le<uint16_t>(os, uint16_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

std::string read_string(std::istream& is, const char* what) {
  const uint16_t n = read_le<uint16_t>(is, what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n))
    throw TruncatedFileError(std::string("model file truncated while reading ") + what);
  return s;
}

void write_int_list(std::ostream& os, const std::vector<int>& v) {
  write_le<uint32_t>(os, uint32_t(v.size()));
  for (int x : v) write_le<int32_t>(os, x);
}

std::vector<int> read_int_list(std::istream& is, const char* what) {
  const uint32_t n = read_le<uint32_t>(is, what);
  if (n > 1024) throw IoError(std::string("implausible list length in model file for ") + what);
  std::vector<int> v(n);
  for (auto& x : v) x = read_le<int32_t>(is, what);
  return v;
}

void write_config(std::ostream& os, const ModelConfig& c) {
  write_le<int32_t>(os, c.in_channels);
  write_le<int32_t>(os, c.width);
  write_int_list(os, c.input_kernels);
  write_int_list(os, c.block_kernels);
  write_le<int32_t>(os, c.num_blocks);
  write_int_list(os, c.stride2_blocks);
  write_le<int32_t>(os, c.decoder_kernel);
  write_le<int32_t>(os, c.decoder_stages);
  write_le<double>(os, c.dropout_p);
  write_le<int32_t>(os, c.num_classes);
  write_le<double>(os, c.bn_epsilon);
  write_le<double>(os, c.bn_momentum);
}

ModelConfig read_config(std::istream& is) {
  ModelConfig c;
  c.in_channels = read_le<int32_t>(is, "config");
  c.width = read_le<int32_t>(is, "config");
  c.input_kernels = read_int_list(is, "config");
  c.block_kernels = read_int_list(is, "config");
  c.num_blocks = read_le<int32_t>(is, "config");
  c.stride2_blocks = read_int_list(is, "config");
  c.decoder_kernel = read_le<int32_t>(is, "config");
  c.decoder_stages = read_le<int32_t>(is, "config");
  c.dropout_p = read_le<double>(is, "config");
  c.num_classes = read_le<int32_t>(is, "config");
  c.bn_epsilon = read_le<double>(is, "config");
  c.bn_momentum = read_le<double>(is, "config");
  return c;
}

template <typename T>
constexpr uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

// Payload bytes of a value span in little-endian order.
template <typename T>
std::vector<unsigned char> encode_payload(const T* data, int64_t n) {
  std::vector<unsigned char> bytes(size_t(n) * sizeof(T));
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(bytes.data(), data, bytes.size());
  } else {
    for (int64_t i = 0; i < n; ++i) {
      unsigned char tmp[sizeof(T)];
      std::memcpy(tmp, data + i, sizeof(T));
      for (size_t b = 0; b < sizeof(T); ++b) bytes[size_t(i) * sizeof(T) + b] = tmp[sizeof(T) - 1 - b];
    }
  }
  return bytes;
}

uint32_t payload_crc(const std::vector<unsigned char>& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // crc32 takes uInt lengths; feed in chunks to stay correct for any size
  size_t off = 0;
  while (off < bytes.size()) {
    const size_t chunk = std::min<size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, uInt(chunk));
    off += chunk;
  }
  return uint32_t(crc);
}

template <typename T>
void write_record(std::ostream& os, const std::string& name, uint8_t kind, const Shape& dims,
                  const T* data, int64_t n) {
  write_string(os, name);
  write_le<uint8_t>(os, dtype_code<T>());
  write_le<uint8_t>(os, kind);
  write_le<uint8_t>(os, uint8_t(dims.size()));
  for (int64_t d : dims) write_le<int64_t>(os, d);
  const auto bytes = encode_payload(data, n);
  write_le<uint32_t>(os, payload_crc(bytes));
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

struct RawRecord {
  std::string name;
  uint8_t dtype = 0;
  uint8_t kind = 0;
  Shape dims;
  std::vector<double> values;  // widened; narrowed again on fill if needed
};

RawRecord read_record(std::istream& is) {
  RawRecord r;
  r.name = read_string(is, "tensor name");
  r.dtype = read_le<uint8_t>(is, "tensor dtype");
  if (r.dtype > 1) throw IoError("unknown dtype code in model file for tensor '" + r.name + "'");
  r.kind = read_le<uint8_t>(is, "tensor kind");
  if (r.kind > 2) throw IoError("unknown record kind in model file for tensor '" + r.name + "'");
  const uint8_t ndim = read_le<uint8_t>(is, "tensor rank");
  if (ndim > 8) throw IoError("implausible tensor rank in model file for '" + r.name + "'");
  int64_t numel = 1;
  for (int i = 0; i < ndim; ++i) {
    const int64_t d = read_le<int64_t>(is, "tensor dims");
    if (d < 1 || d > kMaxTensorElems || numel > kMaxTensorElems / d)
      throw IoError("implausible tensor shape in model file for '" + r.name + "'");
    r.dims.push_back(d);
    numel *= d;
  }
  const uint32_t stored_crc = read_le<uint32_t>(is, "tensor checksum");
  const size_t elem = r.dtype == 0 ? sizeof(float) : sizeof(double);
  std::vector<unsigned char> bytes(size_t(numel) * elem);
  if (!bytes.empty() &&
      !is.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size())))
    throw TruncatedFileError("model file truncated while reading payload of tensor '" + r.name +
                             "'");
  if (payload_crc(bytes) != stored_crc)
    throw ChecksumError("checksum mismatch for tensor '" + r.name + "'");
  r.values.resize(size_t(numel));
  for (int64_t i = 0; i < numel; ++i) {
    unsigned char tmp[8];
    std::memcpy(tmp, bytes.data() + size_t(i) * elem, elem);
    if constexpr (std::endian::native != std::endian::little)
      for (size_t b = 0; b < elem / 2; ++b) std::swap(tmp[b], tmp[elem - 1 - b]);
    if (r.dtype == 0) {
      float f;
      std::memcpy(&f, tmp, sizeof f);
      r.values[size_t(i)] = double(f);
    } else {
      double d;
      std::memcpy(&d, tmp, sizeof d);
      r.values[size_t(i)] = d;
    }
  }
  return r;
}

}  // namespace

template <typename T>
void save_model(ModelT<T>& model, std::ostream& os, const ExtraRecordsT<T>& extras) {
  os.write(kMagic, 4);
  write_le<uint32_t>(os, kModelFormatVersion);
  write_config(os, model.config());
  auto params = model.parameters();
  auto buffers = model.named_buffers();
  write_le<uint32_t>(os, uint32_t(params.size() + buffers.size() + extras.size()));
  for (auto& p : params)
    write_record(os, p.name, 0, p.tensor.shape(), p.tensor.data(), p.tensor.numel());
  for (auto& b : buffers)
    write_record(os, b.name, 1, {int64_t(b.data->size())}, b.data->data(),
                 int64_t(b.data->size()));
  for (auto& e : extras)
    write_record(os, e.first, 2, {int64_t(e.second.size())}, e.second.data(),
                 int64_t(e.second.size()));
  if (!os) throw IoError("failed while writing model stream");
}

template <typename T>
void save_model(ModelT<T>& model, const std::string& path, const ExtraRecordsT<T>& extras) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  save_model(model, os, extras);
  os.flush();
  if (!os) throw IoError("failed while writing model file '" + path + "'");
}

template <typename T>
LoadedModelT<T> load_model_full(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw TruncatedFileError("model file truncated while reading magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("not a model file (magic bytes do not match)");
  const uint32_t version = read_le<uint32_t>(is, "format version");
  if (version != kModelFormatVersion)
    throw FormatVersionError("model file format version " + std::to_string(version) +
                             " unsupported; expected " + std::to_string(kModelFormatVersion));
  ModelConfig config = read_config(is);
  config.validate();

  LoadedModelT<T> out{ModelT<T>(config, 0), {}};
  std::map<std::string, TensorT<T>> params;
  for (auto& p : out.model.parameters()) params.emplace(p.name, p.tensor);
  std::map<std::string, std::vector<T>*> buffers;
  for (auto& b : out.model.named_buffers()) buffers.emplace(b.name, b.data);
  std::map<std::string, bool> filled;

  const uint32_t count = read_le<uint32_t>(is, "record count");
  for (uint32_t i = 0; i < count; ++i) {
    RawRecord r = read_record(is);
    if (r.kind == 2) {
      std::vector<T> vals(r.values.size());
      for (size_t j = 0; j < vals.size(); ++j) vals[j] = T(r.values[j]);
      out.extras.emplace_back(r.name, std::move(vals));
      continue;
    }
    if (filled.count(r.name))
      throw IoError("model file lists tensor '" + r.name + "' twice");
    if (r.kind == 0) {
      auto it = params.find(r.name);
      if (it == params.end()) throw IoError("model file has unknown parameter '" + r.name + "'");
      if (it->second.shape() != r.dims)
        throw IoError("model file parameter '" + r.name + "' has shape " + shape_str(r.dims) +
                      ", expected " + shape_str(it->second.shape()));
      for (int64_t j = 0; j < it->second.numel(); ++j) it->second.data()[j] = T(r.values[size_t(j)]);
    } else {
      auto it = buffers.find(r.name);
      if (it == buffers.end())
        throw IoError("model file has unknown running statistic '" + r.name + "'");
      if (r.dims.size() != 1 || size_t(r.dims[0]) != it->second->size())
        throw IoError("model file running statistic '" + r.name + "' has the wrong length");
      for (size_t j = 0; j < it->second->size(); ++j) (*it->second)[j] = T(r.values[j]);
    }
    filled[r.name] = true;
  }
  for (auto& p : params)
    if (!filled.count(p.first)) throw IoError("model file is missing parameter '" + p.first + "'");
  for (auto& b : buffers)
    if (!filled.count(b.first))
      throw IoError("model file is missing running statistic '" + b.first + "'");
  return out;
}

template <typename T>
LoadedModelT<T> load_model_full(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open model file '" + path + "'");
  return load_model_full<T>(is);
}

template <typename T>
ModelT<T> load_model(const std::string& path) {
  return load_model_full<T>(path).model;
}

int64_t serialized_size(const ModelConfig& config) {
  Model model(config, 0);
  std::ostringstream os(std::ios::binary);
  save_model(model, os);
  return int64_t(os.str().size());
}

ComplexityReport analyze_complexity(const ModelConfig& config, int64_t height, int64_t width_px) {
  ComplexityReport r = complexity_report(config, height, width_px);
  r.model_size_bytes = serialized_size(config);
  return r;
}

template void save_model<float>(ModelT<float>&, std::ostream&, const ExtraRecordsT<float>&);
template void save_model<double>(ModelT<double>&, std::ostream&, const ExtraRecordsT<double>&);
template void save_model<float>(ModelT<float>&, const std::string&, const ExtraRecordsT<float>&);
template void save_model<double>(ModelT<double>&, const std::string&, const ExtraRecordsT<double>&);
template LoadedModelT<float> load_model_full<float>(std::istream&);
template LoadedModelT<double> load_model_full<double>(std::istream&);
template LoadedModelT<float> load_model_full<float>(const std::string&);
template LoadedModelT<double> load_model_full<double>(const std::string&);
template ModelT<float> load_model<float>(const std::string&);
template ModelT<double> load_model<double>(const std::string&);

}  // namespace mkis
