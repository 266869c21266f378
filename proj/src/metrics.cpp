#include "osseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace osseg {

double average_precision(std::span<const float> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("average_precision: " + std::to_string(scores.size()) +
                                " scores but " + std::to_string(labels.size()) + " labels");
  const auto positives = static_cast<std::size_t>(
      std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  if (positives == 0) throw std::invalid_argument("average_precision: no positive labels");

  std::vector<std::uint32_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(),
            [&](std::uint32_t a, std::uint32_t b) { return scores[a] > scores[b]; });

  double ap = 0;
  std::size_t seen = 0, hits = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, block_hits = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      block_hits += labels[order[j]] != 0;
      ++j;
    }
    seen += j - i;
    hits += block_hits;
    if (block_hits)
      ap += static_cast<double>(block_hits) * (static_cast<double>(hits) / static_cast<double>(seen));
    i = j;
  }
  return ap / static_cast<double>(positives);
}

AssayResult ap_assays(const std::vector<std::vector<float>>& inlier_scores_by_image,
                      const std::vector<std::vector<float>>& negative_scores_by_image,
                      std::size_t num_assays, const Rng& rng) {
  if (num_assays == 0) throw std::invalid_argument("ap_assays: num_assays must be positive");
  if (inlier_scores_by_image.empty() || negative_scores_by_image.empty())
    throw std::invalid_argument("ap_assays: empty inlier or negative pool");
  std::size_t inlier_pixels = 0;
  for (const auto& img : inlier_scores_by_image) inlier_pixels += img.size();

  AssayResult r;
  r.per_assay.assign(num_assays, 0.0);
  const auto n = static_cast<long>(num_assays);
#pragma omp parallel for schedule(dynamic)
  for (long a = 0; a < n; ++a) {
    Rng local = rng.derive(static_cast<std::uint64_t>(a));
    std::vector<std::size_t> order(negative_scores_by_image.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<std::size_t>(local.uniform_int(0, static_cast<std::int64_t>(i)))]);

    std::vector<float> scores;
    std::vector<std::uint8_t> labels;
    for (const auto& img : inlier_scores_by_image) scores.insert(scores.end(), img.begin(), img.end());
    labels.assign(scores.size(), 0);
    std::size_t taken = 0;
    for (std::size_t k = 0; k < order.size() && taken < inlier_pixels; ++k) {
      const auto& img = negative_scores_by_image[order[k]];
      scores.insert(scores.end(), img.begin(), img.end());
      taken += img.size();
    }
    labels.resize(scores.size(), 1);
    r.per_assay[static_cast<std::size_t>(a)] = average_precision(scores, labels);
  }
  double sum = 0;
  for (double v : r.per_assay) sum += v;
  r.mean = sum / static_cast<double>(num_assays);
  double var = 0;
  for (double v : r.per_assay) var += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(var / static_cast<double>(num_assays));
  return r;
}

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : n_(num_classes), m_(num_classes * (num_classes + 1), 0) {
  if (num_classes == 0) throw std::invalid_argument("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(std::span<const std::uint8_t> pred, const LabelPair& gt) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("confusion matrix: " + std::to_string(pred.size()) +
                                " predictions for " + std::to_string(gt.size()) + " labels");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt.z[i] != kInlier || gt.y[i] >= n_) continue;
    const std::size_t p = std::min<std::size_t>(pred[i], n_);
    ++m_[gt.y[i] * (n_ + 1) + p];
  }
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(m_.begin(), m_.end(), std::uint64_t{0});
}

std::vector<double> ConfusionMatrix::iou() const {
  std::vector<double> out(n_);
  for (std::size_t c = 0; c < n_; ++c) {
    std::uint64_t tp = count(c, c), fn = 0, fp = 0;
    for (std::size_t p = 0; p <= n_; ++p)
      if (p != c) fn += count(c, p);
    for (std::size_t t = 0; t < n_; ++t)
      if (t != c) fp += count(t, c);
    const std::uint64_t denom = tp + fp + fn;
    out[c] = denom ? static_cast<double>(tp) / static_cast<double>(denom)
                   : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

double ConfusionMatrix::miou() const {
  if (total() == 0) throw std::invalid_argument("mIoU: no valid pixels");
  const auto ious = iou();
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_; ++c) {
    std::uint64_t support = 0;
    for (std::size_t p = 0; p <= n_; ++p) support += count(c, p);
    if (support == 0) continue;
    sum += ious[c];
    ++present;
  }
  return sum / static_cast<double>(present);
}

MiouResult miou(const std::vector<std::vector<std::uint8_t>>& pred,
                const std::vector<LabelPair>& gt, std::size_t num_classes) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("mIoU: " + std::to_string(pred.size()) + " prediction maps for " +
                                std::to_string(gt.size()) + " label maps");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < pred.size(); ++i) cm.add(pred[i], gt[i]);
  return {cm.iou(), cm.miou()};
}

std::map<std::string, double> hazard_drop(const std::map<std::string, double>& miou_by_subset,
                                          double miou_classic) {
  if (!(miou_classic > 0)) throw std::invalid_argument("hazard_drop: classic mIoU must be positive");
  std::map<std::string, double> out;
  for (const auto& [name, m] : miou_by_subset) out[name] = 100.0 * (m - miou_classic) / miou_classic;
  return out;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["score_mode"] = score_mode;
  j["num_assays"] = num_assays;
  j["threshold"] = threshold;
  j["ap_mean"] = ap_mean;
  j["ap_std"] = ap_std;
  j["pasted_ap"] = pasted_ap;
  j["per_class_iou"] = nlohmann::json::array();
  for (double v : per_class_iou)
    j["per_class_iou"].push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
  j["miou"] = miou;
  j["negative_miou"] = negative_miou;
  j["hazard_miou"] = hazard_miou;
  j["hazard_drops"] = hazard_drops;
  return j.dump(2);
}

std::string render_table(const std::vector<EvalReport>& reports) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-14s %18s %12s %8s\n", "score", "AP whole-image",
                "AP pasted", "mIoU");
  out += line;
  out += std::string(55, '-') + '\n';
  for (const auto& r : reports) {
    char ap[32];
    std::snprintf(ap, sizeof ap, "%.2f +- %.2f", 100 * r.ap_mean, 100 * r.ap_std);
    std::snprintf(line, sizeof line, "%-14s %18s %12.2f %8.2f\n", r.score_mode.c_str(), ap,
                  100 * r.pasted_ap, 100 * r.miou);
    out += line;
  }
  return out;
}

}  // namespace osseg
