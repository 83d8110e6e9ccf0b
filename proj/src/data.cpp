#include "mkis/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mkis/error.hpp"
#include "mkis/rng.hpp"

namespace fs = std::filesystem;

namespace mkis {

void Sample::validate() const {
  if (id.empty()) throw DataError("sample has an empty id");
  if (image.h < 1 || image.w < 1 || image.c < 1)
    throw DataError("sample '" + id + "' has an empty image");
  if (label.h != image.h || label.w != image.w)
    throw DataError("sample '" + id + "' label is " + std::to_string(label.h) + "x" +
                    std::to_string(label.w) + " but the image is " + std::to_string(image.h) +
                    "x" + std::to_string(image.w));
  if (!label.is_binary()) throw DataError("sample '" + id + "' label is not binary");
  if (fov_mask) {
    if (fov_mask->h != image.h || fov_mask->w != image.w)
      throw DataError("sample '" + id + "' mask shape does not match the image");
    require_binary(*fov_mask, ("sample '" + id + "' mask").c_str());
  }
  for (float v : image.v)
    if (!(v >= 0.0f && v <= 1.0f))
      throw DataError("sample '" + id + "' has image values outside [0,1]");
}

// ---- Manifest ----------------------------------------------------------------

namespace {

[[noreturn]] void manifest_error(const std::string& path, int line, const std::string& why) {
  throw DataError("manifest '" + path + "' line " + std::to_string(line) + ": " + why);
}

std::vector<std::string> split_tabs(const std::string& s) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t tab = s.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, tab - start));
    start = tab + 1;
  }
}

std::string resolve(const fs::path& base_dir, const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path.string();
  return (base_dir / path).lexically_normal().string();
}

}  // namespace

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest '" + path + "'");
  const fs::path base_dir = fs::path(path).parent_path();

  DatasetManifest m;
  bool saw_header = false;
  std::set<std::string> ids;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    // strip leading whitespace for comment/blank detection only
    const size_t first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;

    if (!saw_header) {
      std::istringstream ls(line);
      std::string tok;
      std::string resize_spec = "native";
      bool have_dataset = false, have_split = false;
      while (ls >> tok) {
        const size_t eq = tok.find('=');
        if (eq == std::string::npos)
          manifest_error(path, lineno, "header token '" + tok + "' is not key=value");
        const std::string key = tok.substr(0, eq), value = tok.substr(eq + 1);
        if (key == "dataset") {
          m.name = value;
          have_dataset = true;
        } else if (key == "split") {
          if (value != "train" && value != "test")
            manifest_error(path, lineno, "split must be 'train' or 'test', got '" + value + "'");
          m.split = value;
          have_split = true;
        } else if (key == "resize") {
          resize_spec = value;
        } else {
          manifest_error(path, lineno, "unknown header key '" + key + "'");
        }
      }
      if (!have_dataset || !have_split)
        manifest_error(path, lineno, "header must declare dataset= and split=");
      if (resize_spec != "native") {
        const size_t x = resize_spec.find('x');
        int64_t h = 0, w = 0;
        try {
          if (x == std::string::npos) throw std::invalid_argument("no separator");
          h = std::stoll(resize_spec.substr(0, x));
          w = std::stoll(resize_spec.substr(x + 1));
        } catch (...) {
          manifest_error(path, lineno, "resize must be 'native' or HxW, got '" + resize_spec + "'");
        }
        if (h < 1 || w < 1) manifest_error(path, lineno, "resize dimensions must be positive");
        m.resize = true;
        m.resize_h = h;
        m.resize_w = w;
      }
      saw_header = true;
      continue;
    }

    const auto fields = split_tabs(line);
    if (fields.size() != 3 && fields.size() != 4)
      manifest_error(path, lineno,
                     "expected 'id<TAB>image<TAB>label[<TAB>mask]', got " +
                         std::to_string(fields.size()) + " fields");
    ManifestRecord rec;
    rec.id = fields[0];
    rec.image_path = resolve(base_dir, fields[1]);
    rec.label_path = resolve(base_dir, fields[2]);
    if (fields.size() == 4) rec.mask_path = resolve(base_dir, fields[3]);
    rec.line = lineno;
    if (rec.id.empty()) manifest_error(path, lineno, "record id is empty");
    if (!ids.insert(rec.id).second)
      manifest_error(path, lineno, "duplicate record id '" + rec.id + "'");
    for (const std::string* p : {&rec.image_path, &rec.label_path}) {
      if (!fs::exists(*p))
        manifest_error(path, lineno,
                       "record '" + rec.id + "' references missing file '" + *p + "'");
    }
    if (!rec.mask_path.empty() && !fs::exists(rec.mask_path))
      manifest_error(path, lineno,
                     "record '" + rec.id + "' references missing mask '" + rec.mask_path + "'");
    m.records.push_back(std::move(rec));
  }
  if (!saw_header) throw DataError("manifest '" + path + "' has no header line");
  return m;
}

// ---- Decoding helpers ----------------------------------------------------------

ByteMap binarize_label(const ImageF& raw, double threshold) {
  ByteMap out(raw.h, raw.w);
  for (int64_t y = 0; y < raw.h; ++y)
    for (int64_t x = 0; x < raw.w; ++x) {
      const float v0 = raw.at(y, x, 0);
      for (int64_t ch = 1; ch < raw.c; ++ch)
        if (raw.at(y, x, ch) != v0)
          throw DataError("label image has disagreeing channels at pixel (" + std::to_string(y) +
                          "," + std::to_string(x) + "); expected grayscale content");
      out.at(y, x) = v0 > threshold ? 1 : 0;
    }
  return out;
}

ImageF resize_bilinear(const ImageF& src, int64_t out_h, int64_t out_w) {
  ImageF out;
  out.h = out_h;
  out.w = out_w;
  out.c = src.c;
  out.v.resize(size_t(out_h) * size_t(out_w) * size_t(src.c));
  const double sy = double(src.h) / double(out_h), sx = double(src.w) / double(out_w);
  for (int64_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(src.h - 1));
    const int64_t y0 = int64_t(fy), y1 = std::min(y0 + 1, src.h - 1);
    const double wy = fy - double(y0);
    for (int64_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(src.w - 1));
      const int64_t x0 = int64_t(fx), x1 = std::min(x0 + 1, src.w - 1);
      const double wx = fx - double(x0);
      for (int64_t ch = 0; ch < src.c; ++ch) {
        const double top = (1.0 - wx) * src.at(y0, x0, ch) + wx * src.at(y0, x1, ch);
        const double bot = (1.0 - wx) * src.at(y1, x0, ch) + wx * src.at(y1, x1, ch);
        out.at(y, x, ch) = float((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

ByteMap resize_nearest(const ByteMap& src, int64_t out_h, int64_t out_w) {
  ByteMap out(out_h, out_w);
  const double sy = double(src.h) / double(out_h), sx = double(src.w) / double(out_w);
  for (int64_t y = 0; y < out_h; ++y) {
    const int64_t yy = std::clamp(int64_t(std::floor((y + 0.5) * sy)), int64_t(0), src.h - 1);
    for (int64_t x = 0; x < out_w; ++x) {
      const int64_t xx = std::clamp(int64_t(std::floor((x + 0.5) * sx)), int64_t(0), src.w - 1);
      out.at(y, x) = src.at(yy, xx);
    }
  }
  return out;
}

Sample load_sample(const DatasetManifest& manifest, size_t index, int in_channels) {
  if (index >= manifest.records.size())
    throw DataError("sample index " + std::to_string(index) + " out of range (manifest has " +
                    std::to_string(manifest.records.size()) + " records)");
  const ManifestRecord& rec = manifest.records[index];
  Sample s;
  s.id = rec.id;

  ImageF img = decode_image(rec.image_path);
  if (img.c == 1 && in_channels > 1) {
    ImageF rep;
    rep.h = img.h;
    rep.w = img.w;
    rep.c = in_channels;
    rep.v.resize(size_t(img.h) * size_t(img.w) * size_t(in_channels));
    for (int64_t y = 0; y < img.h; ++y)
      for (int64_t x = 0; x < img.w; ++x)
        for (int ch = 0; ch < in_channels; ++ch) rep.at(y, x, ch) = img.at(y, x, 0);
    img = std::move(rep);
  } else if (img.c != in_channels) {
    throw DataError("record '" + rec.id + "': image '" + rec.image_path + "' has " +
                    std::to_string(img.c) + " channels but the model expects " +
                    std::to_string(in_channels));
  }

  ByteMap label = binarize_label(decode_image(rec.label_path));
  std::optional<ByteMap> mask;
  if (!rec.mask_path.empty()) mask = binarize_label(decode_image(rec.mask_path));

  if (manifest.resize) {
    img = resize_bilinear(img, manifest.resize_h, manifest.resize_w);
    label = resize_nearest(label, manifest.resize_h, manifest.resize_w);
    if (mask) mask = resize_nearest(*mask, manifest.resize_h, manifest.resize_w);
  }

  s.image = std::move(img);
  s.label = std::move(label);
  s.fov_mask = std::move(mask);
  s.validate();
  return s;
}

// ---- Augmentation ---------------------------------------------------------------

namespace {

// Exact permutation for right-angle rotations (counterclockwise) about the
// canvas center. 180 degrees stays on-grid for any canvas; 90/270 only when
// h and w share parity (otherwise the rotated grid lands between pixels and
// the caller must interpolate like any other angle).
bool quarter_on_grid(int64_t h, int64_t w, int quarter_turns) {
  return quarter_turns % 2 == 0 || (h - w) % 2 == 0;
}

template <typename Set>
void permute_quarter(int64_t h, int64_t w, int quarter_turns, Set&& set) {
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      // Destination (y, x) pulls from the source rotated clockwise by the
      // same amount about the center ((h-1)/2, (w-1)/2).
      int64_t sy = y, sx = x;
      switch (quarter_turns) {
        case 1: sy = x + (h - w) / 2, sx = (h + w) / 2 - 1 - y; break;  // 90 CCW
        case 2: sy = h - 1 - y, sx = w - 1 - x; break;                  // 180
        case 3: sy = (h + w) / 2 - 1 - x, sx = y + (w - h) / 2; break;  // 270
        default: break;
      }
      // Corners of a non-square canvas rotate off-canvas: fill with zero.
      if (sy < 0 || sy >= h || sx < 0 || sx >= w)
        set(y, x, -1, -1);
      else
        set(y, x, sy, sx);
    }
}

}  // namespace

Sample rotate_sample(const Sample& sample, double degrees) {
  const int64_t h = sample.image.h, w = sample.image.w;
  Sample out;
  out.id = sample.id;
  out.image.h = h;
  out.image.w = w;
  out.image.c = sample.image.c;
  out.image.v.assign(sample.image.v.size(), 0.0f);
  out.label = ByteMap(h, w, 0);
  if (sample.fov_mask) out.fov_mask = ByteMap(h, w, 0);

  double norm = std::fmod(degrees, 360.0);
  if (norm < 0) norm += 360.0;
  if (std::fmod(norm, 90.0) == 0.0 && quarter_on_grid(h, w, int(norm / 90.0) % 4)) {
    const int quarter = int(norm / 90.0) % 4;
    permute_quarter(h, w, quarter, [&](int64_t y, int64_t x, int64_t sy, int64_t sx) {
      if (sy < 0) return;  // zero fill already in place
      for (int64_t ch = 0; ch < sample.image.c; ++ch)
        out.image.at(y, x, ch) = sample.image.at(sy, sx, ch);
      out.label.at(y, x) = sample.label.at(sy, sx);
      if (sample.fov_mask) out.fov_mask->at(y, x) = sample.fov_mask->at(sy, sx);
    });
    return out;
  }

  const double rad = norm * 3.14159265358979323846 / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cy = double(h - 1) / 2.0, cx = double(w - 1) / 2.0;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      // Inverse map: rotate the destination offset clockwise back to source.
      const double dy = double(y) - cy, dx = double(x) - cx;
      const double sy = c * dy + s * dx + cy;
      const double sx = -s * dy + c * dx + cx;
      // nearest-neighbor source for label/mask
      const int64_t ny = int64_t(std::lround(sy)), nx = int64_t(std::lround(sx));
      if (ny >= 0 && ny < h && nx >= 0 && nx < w) {
        out.label.at(y, x) = sample.label.at(ny, nx);
        if (sample.fov_mask) out.fov_mask->at(y, x) = sample.fov_mask->at(ny, nx);
      }
      // bilinear source for the image, zero outside the canvas
      const int64_t y0 = int64_t(std::floor(sy)), x0 = int64_t(std::floor(sx));
      const double wy = sy - double(y0), wx = sx - double(x0);
      for (int64_t ch = 0; ch < sample.image.c; ++ch) {
        double acc = 0.0;
        for (int dy2 = 0; dy2 <= 1; ++dy2)
          for (int dx2 = 0; dx2 <= 1; ++dx2) {
            const int64_t yy = y0 + dy2, xx = x0 + dx2;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            const double weight = (dy2 ? wy : 1.0 - wy) * (dx2 ? wx : 1.0 - wx);
            acc += weight * double(sample.image.at(yy, xx, ch));
          }
        out.image.at(y, x, ch) = float(std::clamp(acc, 0.0, 1.0));
      }
    }
  return out;
}

Sample adjust_brightness(const Sample& sample, double gain) {
  if (!(gain > 0.0)) throw ConfigError("brightness gain must be positive, got " +
                                       std::to_string(gain));
  Sample out = sample;
  for (float& v : out.image.v) v = float(std::clamp(gain * double(v), 0.0, 1.0));
  return out;
}

AugmentStream::AugmentStream(std::shared_ptr<SampleSource> base, AugmentConfig config,
                             uint64_t seed)
    : base_(std::move(base)), config_(config), seed_(seed) {
  if (!base_ || base_->size() < 1) throw DataError("augmentation needs a non-empty source");
  if (config_.rotations < 0 || config_.brightness_variants < 0 ||
      config_.rotations + config_.brightness_variants < 1)
    throw ConfigError("augmentation must produce at least one variant per source sample");
  if (!(config_.gain_lo > 0.0) || !(config_.gain_hi > config_.gain_lo))
    throw ConfigError("invalid brightness gain range [" + std::to_string(config_.gain_lo) + ", " +
                      std::to_string(config_.gain_hi) + "]");
}

int64_t AugmentStream::size() const { return base_->size() * per_source(); }

double AugmentStream::gain_for(int64_t source_index, int variant) const {
  Rng rng(derive_seed(seed_, uint64_t(source_index) * 1000003ULL + uint64_t(variant)));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double g = rng.uniform(config_.gain_lo, config_.gain_hi);
    if (g < config_.dead_lo || g > config_.dead_hi) return g;
  }
  // Dead zone covers the whole range: fall back to the lower bound.
  return config_.gain_lo;
}

Sample AugmentStream::get(int64_t index) {
  if (index < 0 || index >= size())
    throw DataError("augmented index " + std::to_string(index) + " out of range");
  const int64_t j = index / per_source();
  const int v = int(index % per_source());
  if (cached_index_ != j) {
    cached_ = base_->get(j);
    cached_index_ = j;
  }
  Sample out;
  if (v < config_.rotations) {
    out = rotate_sample(cached_, double(v));
    out.id = cached_.id + "_rot" + std::to_string(v);
  } else {
    const int b = v - config_.rotations;
    out = adjust_brightness(cached_, gain_for(j, b));
    out.id = cached_.id + "_bright" + std::to_string(b);
  }
  out.validate();
  return out;
}

// ---- Padding -----------------------------------------------------------------

Sample pad_to_multiple(const Sample& sample, int64_t multiple, CropRecord* record) {
  if (multiple < 1) throw ConfigError("pad multiple must be >= 1");
  const int64_t h = sample.image.h, w = sample.image.w;
  const int64_t ph = (h + multiple - 1) / multiple * multiple;
  const int64_t pw = (w + multiple - 1) / multiple * multiple;
  if (record) *record = CropRecord{h, w, ph - h, pw - w};
  if (ph == h && pw == w) return sample;

  Sample out;
  out.id = sample.id;
  out.image.h = ph;
  out.image.w = pw;
  out.image.c = sample.image.c;
  out.image.v.resize(size_t(ph) * size_t(pw) * size_t(sample.image.c));
  out.label = ByteMap(ph, pw, 0);
  if (sample.fov_mask) out.fov_mask = ByteMap(ph, pw, 0);
  for (int64_t y = 0; y < ph; ++y) {
    // Edge-inclusive reflection, clamped in case the padding exceeds the image.
    const int64_t sy = y < h ? y : std::clamp(2 * h - 1 - y, int64_t(0), h - 1);
    for (int64_t x = 0; x < pw; ++x) {
      const int64_t sx = x < w ? x : std::clamp(2 * w - 1 - x, int64_t(0), w - 1);
      for (int64_t ch = 0; ch < sample.image.c; ++ch)
        out.image.at(y, x, ch) = sample.image.at(sy, sx, ch);
      if (y < h && x < w) {
        out.label.at(y, x) = sample.label.at(y, x);
        if (sample.fov_mask) out.fov_mask->at(y, x) = sample.fov_mask->at(y, x);
      }
    }
  }
  return out;
}

ByteMap crop_map(const ByteMap& padded, const CropRecord& record) {
  if (padded.h != record.orig_h + record.pad_bottom || padded.w != record.orig_w + record.pad_right)
    throw ShapeError("crop record does not match the padded map");
  ByteMap out(record.orig_h, record.orig_w);
  for (int64_t y = 0; y < out.h; ++y)
    for (int64_t x = 0; x < out.w; ++x) out.at(y, x) = padded.at(y, x);
  return out;
}

std::vector<float> crop_plane(const std::vector<float>& padded, int64_t padded_h, int64_t padded_w,
                              const CropRecord& record) {
  if (padded_h != record.orig_h + record.pad_bottom ||
      padded_w != record.orig_w + record.pad_right ||
      int64_t(padded.size()) != padded_h * padded_w)
    throw ShapeError("crop record does not match the padded plane");
  std::vector<float> out(size_t(record.orig_h) * size_t(record.orig_w));
  for (int64_t y = 0; y < record.orig_h; ++y)
    for (int64_t x = 0; x < record.orig_w; ++x)
      out[size_t(y * record.orig_w + x)] = padded[size_t(y * padded_w + x)];
  return out;
}

template <typename T>
TensorT<T> batch_tensor(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw DataError("cannot build a batch from zero samples");
  const int64_t h = samples[0]->image.h, w = samples[0]->image.w, c = samples[0]->image.c;
  for (const Sample* s : samples)
    if (s->image.h != h || s->image.w != w || s->image.c != c)
      throw ShapeError("batch mixes sample shapes: '" + samples[0]->id + "' is " +
                       std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c) +
                       " but '" + s->id + "' is " + std::to_string(s->image.h) + "x" +
                       std::to_string(s->image.w) + "x" + std::to_string(s->image.c));
  TensorT<T> out = TensorT<T>::zeros({int64_t(samples.size()), c, h, w});
  for (size_t b = 0; b < samples.size(); ++b) {
    const ImageF& img = samples[b]->image;
    T* dst = out.data() + int64_t(b) * c * h * w;
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) dst[(ch * h + y) * w + x] = T(img.at(y, x, ch));
  }
  return out;
}

template TensorT<float> batch_tensor<float>(const std::vector<const Sample*>&);
template TensorT<double> batch_tensor<double>(const std::vector<const Sample*>&);

}  // namespace mkis
