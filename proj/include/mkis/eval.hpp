#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mkis/bytemap.hpp"
#include "mkis/data.hpp"
#include "mkis/image_io.hpp"
#include "mkis/model.hpp"

namespace mkis {

// Pixel-outcome tallies over the counted (in-mask) region.
struct ConfusionCounts {
  int64_t tp = 0;
  int64_t tn = 0;
  int64_t fp = 0;
  int64_t fn = 0;

  int64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

// A metric that may be undefined (0/0 cases carry the reason instead of a
// silent 0).
struct MetricValue {
  double value = 0.0;
  bool defined = false;
  std::string reason;  // set only when !defined

  static MetricValue of(double v) { return {v, true, {}}; }
  static MetricValue undefined(std::string why) { return {0.0, false, std::move(why)}; }
};

struct MetricsReport {
  std::string dataset;  // identifier for report rows
  std::string model;
  int64_t params = 0;  // trainable parameter count, for the report tables
  ConfusionCounts counts;
  MetricValue se, sp, acc, f1, jaccard, auc;
};

// Pixelwise outcome tallies restricted to mask when present. Inputs must be
// binary and share one shape.
ConfusionCounts confusion(const ByteMap& pred, const ByteMap& gt, const ByteMap* mask = nullptr);

// Derived ratios:
//   se = tp/(tp+fn), sp = tn/(tn+fp), acc = (tp+tn)/total,
//   f1 = 2tp/(2tp+fp+fn), jaccard = tp/(tp+fp+fn)
// Any 0/0 becomes undefined-with-reason. auc is left undefined (it needs
// scores, not counts). Throws DataError when no pixel was counted at all.
MetricsReport metrics_from_counts(const ConfusionCounts& counts);

// Exact rank-based AUC (Mann-Whitney with tie correction) over the given
// (score, binary label) pairs; the vector is taken by value because the
// computation sorts it. Undefined when only one class is present.
MetricValue roc_auc(std::vector<std::pair<double, uint8_t>> scored);

// Same statistic over the in-mask pixels of a single-channel probability
// map. prob values must lie in [0,1].
MetricValue roc_auc(const ImageF& prob, const ByteMap& gt, const ByteMap* mask = nullptr);

// Interleaved 8-bit RGB raster.
struct RgbImage {
  int64_t h = 0;
  int64_t w = 0;
  std::vector<uint8_t> v;  // 3 bytes per pixel, row-major

  RgbImage() = default;
  RgbImage(int64_t h_, int64_t w_) : h(h_), w(w_), v(size_t(h_ * w_ * 3), 0) {}
  uint8_t* px(int64_t y, int64_t x) { return v.data() + (y * w + x) * 3; }
  const uint8_t* px(int64_t y, int64_t x) const { return v.data() + (y * w + x) * 3; }
};

// Outcome visualization: TP black (0,0,0), TN white (255,255,255),
// FP red (255,0,0), FN yellow (255,255,0), outside the mask mid-gray
// (128,128,128).
RgbImage render_accuracy_map(const ByteMap& pred, const ByteMap& gt,
                             const ByteMap* mask = nullptr);

// Pads a sample to the model's spatial multiple, runs inference, and crops
// back: pred gets the per-pixel argmax over the two softmax channels,
// *prob_out (when non-null) the foreground-channel probability map.
template <typename T>
ByteMap predict_sample(ModelT<T>& model, const Sample& sample, ImageF* prob_out = nullptr);

struct DatasetEvaluation {
  MetricsReport pooled;                  // micro average (headline): pooled counts + pooled AUC
  MetricsReport macro;                   // mean of the defined per-image metric values
  std::vector<MetricsReport> per_image;  // sorted by sample id
};

// Evaluates every sample: per-image confusion/metrics/AUC plus the pooled
// (micro) report over all counted pixels. When `failures` is non-null,
// per-sample errors are recorded there (annotated with the sample id) and
// the sample is skipped; otherwise the annotated error propagates.
// `on_sample` is invoked with each successfully predicted sample so callers
// can write visualizations without rerunning inference.
template <typename T>
DatasetEvaluation evaluate_dataset(
    ModelT<T>& model, SampleSource& test_set, const std::string& dataset_name = "",
    const std::string& model_name = "", std::vector<std::string>* failures = nullptr,
    const std::function<void(const Sample&, const ByteMap& pred, const ImageF& prob)>& on_sample =
        {});

// One row per report: "dataset,model,se,sp,acc,auc,f1,jaccard,params".
// Undefined metrics become empty fields; names containing separators are
// quoted.
void write_metrics_csv(const std::vector<MetricsReport>& rows, std::ostream& os);
void write_metrics_csv(const std::vector<MetricsReport>& rows, const std::string& path);

// Aligned plain-text table of the same rows; undefined metrics print "--"
// and their reasons are listed under the table.
std::string render_metrics_table(const std::vector<MetricsReport>& rows);

}  // namespace mkis
