#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "osseg/labels.hpp"
#include "osseg/rng.hpp"

namespace osseg {

/// Average precision of `scores` ranking positives (label 1) first. Equal
/// scores form one block that is credited only at its end, the pessimistic
/// reading of ties.
double average_precision(std::span<const float> scores, std::span<const std::uint8_t> labels);

struct AssayResult {
  double mean = 0, std = 0;  // population std
  std::vector<double> per_assay;
};

/// Repeated AP over inlier pixels (label 0) against a random subset of
/// negative images (label 1). Each assay shuffles the negative images and
/// takes them in order until their pixels reach the inlier pixel count.
AssayResult ap_assays(const std::vector<std::vector<float>>& inlier_scores_by_image,
                      const std::vector<std::vector<float>>& negative_scores_by_image,
                      std::size_t num_assays, const Rng& rng);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  /// Counts pixels with z = 1 and y < N_C; a prediction of N_C (void) is a
  /// miss for the true class.
  void add(std::span<const std::uint8_t> pred, const LabelPair& gt);

  std::size_t num_classes() const { return n_; }
  std::uint64_t count(std::size_t truth, std::size_t pred) const {
    return m_[truth * (n_ + 1) + pred];
  }
  std::uint64_t total() const;
  /// NaN for classes absent from both ground truth and predictions.
  std::vector<double> iou() const;
  /// Mean IoU over classes present in the ground truth.
  double miou() const;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> m_;  // [truth][pred], pred in 0..N_C
};

struct MiouResult {
  std::vector<double> per_class_iou;
  double miou = 0;
};

MiouResult miou(const std::vector<std::vector<std::uint8_t>>& pred,
                const std::vector<LabelPair>& gt, std::size_t num_classes);

/// Signed percentage change of each subset's mIoU relative to the classic set.
std::map<std::string, double> hazard_drop(const std::map<std::string, double>& miou_by_subset,
                                          double miou_classic);

struct EvalReport {
  std::string score_mode;
  std::size_t num_assays = 0;
  double threshold = 0.5;
  double ap_mean = 0, ap_std = 0;  // whole negative images
  double pasted_ap = 0;            // negative objects pasted into inlier scenes
  std::vector<double> per_class_iou;
  double miou = 0;
  double negative_miou = 0;  // inlier pixels of the pasted images
  std::map<std::string, double> hazard_miou;
  std::map<std::string, double> hazard_drops;

  std::string to_json() const;
};

/// Plain-text table: whole-image AP, pasted-object AP, mIoU.
std::string render_table(const std::vector<EvalReport>& reports);

}  // namespace osseg
