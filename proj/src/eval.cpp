#include "mkis/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mkis/error.hpp"

namespace mkis {

namespace {

void check_binary(const ByteMap& map, const char* what) {
  if (!map.is_binary())
    throw DataError(std::string(what) + " contains values other than 0 and 1");
}

void check_same_shape(const ByteMap& a, const ByteMap& b, const char* what) {
  if (a.h != b.h || a.w != b.w)
    throw ShapeError(std::string(what) + " shape " + std::to_string(b.h) + "x" +
                     std::to_string(b.w) + " does not match " + std::to_string(a.h) + "x" +
                     std::to_string(a.w));
}

}  // namespace

ConfusionCounts confusion(const ByteMap& pred, const ByteMap& gt, const ByteMap* mask) {
  check_same_shape(pred, gt, "ground truth");
  if (mask) check_same_shape(pred, *mask, "mask");
  check_binary(pred, "prediction");
  check_binary(gt, "ground truth");
  if (mask) check_binary(*mask, "mask");

  ConfusionCounts c;
  for (int64_t i = 0; i < pred.size(); ++i) {
    if (mask && mask->v[size_t(i)] == 0) continue;
    const bool p = pred.v[size_t(i)] != 0;
    const bool g = gt.v[size_t(i)] != 0;
    if (p && g)
      ++c.tp;
    else if (!p && !g)
      ++c.tn;
    else if (p && !g)
      ++c.fp;
    else
      ++c.fn;
  }
  return c;
}

MetricsReport metrics_from_counts(const ConfusionCounts& counts) {
  if (counts.tp < 0 || counts.tn < 0 || counts.fp < 0 || counts.fn < 0)
    throw DataError("confusion counts must be non-negative");
  const int64_t total = counts.total();
  if (total == 0) throw DataError("no pixels were counted; metrics are meaningless");

  MetricsReport r;
  r.counts = counts;
  const double tp = double(counts.tp), tn = double(counts.tn);
  const double fp = double(counts.fp), fn = double(counts.fn);

  r.se = counts.tp + counts.fn > 0
             ? MetricValue::of(tp / (tp + fn))
             : MetricValue::undefined("no positive ground-truth pixels (tp+fn = 0)");
  r.sp = counts.tn + counts.fp > 0
             ? MetricValue::of(tn / (tn + fp))
             : MetricValue::undefined("no negative ground-truth pixels (tn+fp = 0)");
  r.acc = MetricValue::of((tp + tn) / double(total));
  r.f1 = counts.tp + counts.fp + counts.fn > 0
             ? MetricValue::of(2.0 * tp / (2.0 * tp + fp + fn))
             : MetricValue::undefined("no foreground pixels in prediction or ground truth");
  r.jaccard = counts.tp + counts.fp + counts.fn > 0
                  ? MetricValue::of(tp / (tp + fp + fn))
                  : MetricValue::undefined("no foreground pixels in prediction or ground truth");
  r.auc = MetricValue::undefined("not computed from counts");
  return r;
}

MetricValue roc_auc(std::vector<std::pair<double, uint8_t>> scored) {
  int64_t n_pos = 0, n_neg = 0;
  for (const auto& [s, y] : scored) (y ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    return MetricValue::undefined("only one class present in the ground truth");

  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  // average ranks within tied groups, then the Mann-Whitney statistic
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < scored.size()) {
    size_t j = i;
    while (j < scored.size() && scored[j].first == scored[i].first) ++j;
    const double avg_rank = 0.5 * (double(i + 1) + double(j));  // ranks are 1-based
    for (size_t k = i; k < j; ++k)
      if (scored[k].second) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * double(n_pos) * double(n_pos + 1);
  return MetricValue::of(u / (double(n_pos) * double(n_neg)));
}

MetricValue roc_auc(const ImageF& prob, const ByteMap& gt, const ByteMap* mask) {
  if (prob.c != 1)
    throw ShapeError("probability map must have one channel, got " + std::to_string(prob.c));
  if (prob.h != gt.h || prob.w != gt.w)
    throw ShapeError("probability map " + std::to_string(prob.h) + "x" + std::to_string(prob.w) +
                     " does not match ground truth " + std::to_string(gt.h) + "x" +
                     std::to_string(gt.w));
  if (mask) check_same_shape(gt, *mask, "mask");
  check_binary(gt, "ground truth");
  if (mask) check_binary(*mask, "mask");

  std::vector<std::pair<double, uint8_t>> scored;
  scored.reserve(size_t(gt.size()));
  for (int64_t i = 0; i < gt.size(); ++i) {
    if (mask && mask->v[size_t(i)] == 0) continue;
    const float p = prob.v[size_t(i)];
    if (!(p >= 0.0f && p <= 1.0f))
      throw DataError("probability value " + std::to_string(p) + " outside [0,1]");
    scored.push_back({double(p), gt.v[size_t(i)]});
  }
  return roc_auc(std::move(scored));
}

RgbImage render_accuracy_map(const ByteMap& pred, const ByteMap& gt, const ByteMap* mask) {
  check_same_shape(pred, gt, "ground truth");
  if (mask) check_same_shape(pred, *mask, "mask");
  check_binary(pred, "prediction");
  check_binary(gt, "ground truth");
  if (mask) check_binary(*mask, "mask");

  RgbImage img(pred.h, pred.w);
  for (int64_t y = 0; y < pred.h; ++y)
    for (int64_t x = 0; x < pred.w; ++x) {
      uint8_t* px = img.px(y, x);
      if (mask && mask->at(y, x) == 0) {
        px[0] = px[1] = px[2] = 128;  // outside the field of view
        continue;
      }
      const bool p = pred.at(y, x) != 0;
      const bool g = gt.at(y, x) != 0;
      if (p && g) {
        px[0] = px[1] = px[2] = 0;  // TP: black
      } else if (!p && !g) {
        px[0] = px[1] = px[2] = 255;  // TN: white
      } else if (p && !g) {
        px[0] = 255;  // FP: red
        px[1] = px[2] = 0;
      } else {
        px[0] = px[1] = 255;  // FN: yellow
        px[2] = 0;
      }
    }
  return img;
}

template <typename T>
ByteMap predict_sample(ModelT<T>& model, const Sample& sample, ImageF* prob_out) {
  const int64_t multiple = model.config().spatial_multiple();
  const int64_t h = sample.image.h, w = sample.image.w;

  const Sample* input = &sample;
  Sample padded;
  if (h % multiple != 0 || w % multiple != 0) {
    padded = pad_to_multiple(sample, multiple, nullptr);
    input = &padded;
  }
  std::vector<const Sample*> ptrs{input};
  TensorT<T> x = batch_tensor<T>(ptrs);
  TensorT<T> probs = model.forward(x, Mode::infer, nullptr);

  const int64_t ph = input->image.h, pw = input->image.w;
  auto vals = probs.values();
  ByteMap pred(h, w);
  if (prob_out) *prob_out = ImageF{h, w, 1, std::vector<float>(size_t(h * w), 0.0f)};
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x2 = 0; x2 < w; ++x2) {
      const T p0 = vals[size_t(y * pw + x2)];
      const T p1 = vals[size_t(ph * pw + y * pw + x2)];
      pred.at(y, x2) = p1 > p0 ? 1 : 0;
      if (prob_out) prob_out->at(y, x2, 0) = float(p1);
    }
  return pred;
}

template ByteMap predict_sample<float>(ModelT<float>&, const Sample&, ImageF*);
template ByteMap predict_sample<double>(ModelT<double>&, const Sample&, ImageF*);

namespace {

// mean of the defined per-image values; undefined when every image's value
// was undefined
MetricValue macro_mean(const std::vector<MetricsReport>& reports,
                       MetricValue MetricsReport::*field) {
  double sum = 0.0;
  int64_t n = 0;
  for (const MetricsReport& r : reports)
    if ((r.*field).defined) {
      sum += (r.*field).value;
      ++n;
    }
  if (n == 0) return MetricValue::undefined("undefined for every image");
  return MetricValue::of(sum / double(n));
}

[[noreturn]] void rethrow_annotated(const std::string& who) {
  try {
    throw;
  } catch (const ShapeError& e) {
    throw ShapeError(who + ": " + e.what());
  } catch (const GeometryError& e) {
    throw GeometryError(who + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(who + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(who + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(who + ": " + e.what());
  } catch (const Error& e) {
    throw DataError(who + ": " + e.what());
  }
}

}  // namespace

template <typename T>
DatasetEvaluation evaluate_dataset(
    ModelT<T>& model, SampleSource& test_set, const std::string& dataset_name,
    const std::string& model_name, std::vector<std::string>* failures,
    const std::function<void(const Sample&, const ByteMap&, const ImageF&)>& on_sample) {
  if (test_set.size() < 1) throw DataError("test set is empty");
  const int64_t params = count_parameters(model.config());

  DatasetEvaluation out;
  ConfusionCounts pooled_counts;
  std::vector<std::pair<double, uint8_t>> pooled_scored;

  for (int64_t i = 0; i < test_set.size(); ++i) {
    std::string who = "sample #" + std::to_string(i);
    try {
      Sample s = test_set.get(i);
      who = "sample '" + s.id + "'";

      ImageF prob;
      ByteMap pred = predict_sample(model, s, &prob);
      const ByteMap* mask = s.fov_mask ? &*s.fov_mask : nullptr;

      ConfusionCounts cc = confusion(pred, s.label, mask);
      MetricsReport r = metrics_from_counts(cc);
      r.auc = roc_auc(prob, s.label, mask);
      r.dataset = dataset_name.empty() ? s.id : dataset_name + "/" + s.id;
      r.model = model_name;
      r.params = params;
      out.per_image.push_back(std::move(r));

      pooled_counts += cc;
      for (int64_t k = 0; k < s.label.size(); ++k) {
        if (mask && mask->v[size_t(k)] == 0) continue;
        pooled_scored.push_back({double(prob.v[size_t(k)]), s.label.v[size_t(k)]});
      }
      if (on_sample) on_sample(s, pred, prob);
    } catch (const Error&) {
      if (!failures) rethrow_annotated(who);
      try {
        rethrow_annotated(who);
      } catch (const Error& annotated) {
        failures->push_back(annotated.what());
      }
    }
  }

  if (out.per_image.empty()) throw DataError("no sample was evaluated successfully");
  std::sort(out.per_image.begin(), out.per_image.end(),
            [](const MetricsReport& a, const MetricsReport& b) { return a.dataset < b.dataset; });

  out.pooled = metrics_from_counts(pooled_counts);
  out.pooled.auc = roc_auc(std::move(pooled_scored));
  out.pooled.dataset = dataset_name;
  out.pooled.model = model_name;
  out.pooled.params = params;

  out.macro.counts = pooled_counts;  // counts pool exactly; only the ratios differ
  out.macro.se = macro_mean(out.per_image, &MetricsReport::se);
  out.macro.sp = macro_mean(out.per_image, &MetricsReport::sp);
  out.macro.acc = macro_mean(out.per_image, &MetricsReport::acc);
  out.macro.f1 = macro_mean(out.per_image, &MetricsReport::f1);
  out.macro.jaccard = macro_mean(out.per_image, &MetricsReport::jaccard);
  out.macro.auc = macro_mean(out.per_image, &MetricsReport::auc);
  out.macro.dataset = dataset_name.empty() ? "(macro)" : dataset_name + " (macro)";
  out.macro.model = model_name;
  out.macro.params = params;
  return out;
}

template DatasetEvaluation evaluate_dataset<float>(
    ModelT<float>&, SampleSource&, const std::string&, const std::string&,
    std::vector<std::string>*,
    const std::function<void(const Sample&, const ByteMap&, const ImageF&)>&);
template DatasetEvaluation evaluate_dataset<double>(
    ModelT<double>&, SampleSource&, const std::string&, const std::string&,
    std::vector<std::string>*,
    const std::function<void(const Sample&, const ByteMap&, const ImageF&)>&);

// ---- report emission ----------------------------------------------------------------

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char ch : s) {
    if (ch == '"') quoted += '"';
    quoted += ch;
  }
  quoted += '"';
  return quoted;
}

std::string metric_str(const MetricValue& m, int precision) {
  if (!m.defined) return {};
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << m.value;
  return os.str();
}

}  // namespace

void write_metrics_csv(const std::vector<MetricsReport>& rows, std::ostream& os) {
  os << "dataset,model,se,sp,acc,auc,f1,jaccard,params\n";
  for (const MetricsReport& r : rows) {
    os << csv_field(r.dataset) << ',' << csv_field(r.model) << ',' << metric_str(r.se, 6) << ','
       << metric_str(r.sp, 6) << ',' << metric_str(r.acc, 6) << ',' << metric_str(r.auc, 6) << ','
       << metric_str(r.f1, 6) << ',' << metric_str(r.jaccard, 6) << ',' << r.params << '\n';
  }
}

void write_metrics_csv(const std::vector<MetricsReport>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open metrics file '" + path + "' for writing");
  write_metrics_csv(rows, os);
}

std::string render_metrics_table(const std::vector<MetricsReport>& rows) {
  const char* headers[] = {"Dataset", "Model", "Se", "Sp", "Acc", "AUC", "F1", "Jacc", "Params"};
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> notes;
  for (const MetricsReport& r : rows) {
    auto cell = [&](const MetricValue& m) {
      if (m.defined) return metric_str(m, 4);
      notes.push_back(r.dataset + ": " + m.reason);
      return std::string("--");
    };
    cells.push_back({r.dataset, r.model, cell(r.se), cell(r.sp), cell(r.acc), cell(r.auc),
                     cell(r.f1), cell(r.jaccard), std::to_string(r.params)});
  }

  size_t width[9];
  for (size_t c = 0; c < 9; ++c) {
    width[c] = std::string(headers[c]).size();
    for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  auto emit_row = [&](const std::vector<std::string>& row) {
    for (size_t c = 0; c < 9; ++c) {
      os << std::left << std::setw(int(width[c])) << row[c];
      os << (c + 1 < 9 ? "  " : "");
    }
    os << '\n';
  };
  emit_row({headers, headers + 9});
  std::string rule;
  for (size_t c = 0; c < 9; ++c) rule += std::string(width[c], '-') + (c + 1 < 9 ? "  " : "");
  os << rule << '\n';
  for (const auto& row : cells) emit_row(row);
  for (const std::string& n : notes) os << "note: " << n << " -- metric undefined\n";
  return os.str();
}

}  // namespace mkis
