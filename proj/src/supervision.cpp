#include "comatch/supervision.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "comatch/matcher.hpp"

namespace comatch {

namespace {

double nll_over_cells(const Tensor& probs,
                      const std::vector<std::pair<int, int>>& cells,
                      const char* who) {
  if (cells.empty())
    throw std::invalid_argument(std::string(who) +
                                ": ground-truth match set is empty");
  const int rows = probs.dim(0), cols = probs.dim(1);
  double total = 0.0;
  for (const auto& [i, j] : cells) {
    if (i < 0 || i >= rows || j < 0 || j >= cols)
      throw std::invalid_argument(std::string(who) + ": cell index out of range");
    double p = std::max(static_cast<double>(probs.at(i, j)), 1e-12);
    total -= std::log(p);
  }
  return total / static_cast<double>(cells.size());
}

}  // namespace

double coarse_loss(const Tensor& assignment,
                   const std::vector<std::pair<int, int>>& gt_matches) {
  if (assignment.rank() != 2)
    throw std::invalid_argument("coarse_loss: assignment must be [nA,nB]");
  return nll_over_cells(assignment, gt_matches, "coarse_loss");
}

double fine_stage1_loss(const Tensor& patch_correlation,
                        const std::vector<std::pair<int, int>>& gt_cells) {
  if (patch_correlation.rank() != 2)
    throw std::invalid_argument("fine_stage1_loss: correlation must be rank-2");
  Tensor probs = dual_softmax(patch_correlation);
  return nll_over_cells(probs, gt_cells, "fine_stage1_loss");
}

double theta_f(const CameraIntrinsics& ka, const CameraIntrinsics& kb) {
  double denom = ka.fx + ka.fy + kb.fx + kb.fy;
  if (denom <= 0.0)
    throw std::invalid_argument("theta_f: focal lengths must be positive");
  return 1.5 / denom;
}

double fine_stage2_loss(const std::vector<Vec2>& pts_a_norm,
                        const std::vector<Vec2>& pts_b_norm, const Mat3& e,
                        double theta,
                        std::vector<std::array<double, 4>>* gradients) {
  if (pts_a_norm.empty())
    throw std::invalid_argument("fine_stage2_loss: empty match set");
  if (pts_a_norm.size() != pts_b_norm.size())
    throw std::invalid_argument("fine_stage2_loss: size mismatch");
  if (theta <= 0.0)
    throw std::invalid_argument("fine_stage2_loss: theta must be positive");
  if (gradients) gradients->assign(pts_a_norm.size(), {0.0, 0.0, 0.0, 0.0});

  double total = 0.0;
  for (size_t i = 0; i < pts_a_norm.size(); ++i) {
    double d = sampson_distance(pts_a_norm[i], pts_b_norm[i], e);
    if (std::sqrt(d) < theta) {
      total += d;
      if (gradients)
        (*gradients)[i] = sampson_gradient(pts_a_norm[i], pts_b_norm[i], e);
    } else {
      total += theta;  // clamped branch: constant, zero gradient
    }
  }
  return total;
}

double covisibility_loss(const std::vector<Tensor>& predictions,
                         const std::vector<Tensor>& labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw std::invalid_argument("covisibility_loss: prediction/label mismatch");
  double total = 0.0;
  size_t count = 0;
  for (size_t l = 0; l < predictions.size(); ++l) {
    const Tensor& p = predictions[l];
    const Tensor& y = labels[l];
    if (!p.same_shape(y))
      throw std::invalid_argument("covisibility_loss: shape mismatch at layer " +
                                  std::to_string(l));
    for (int i = 0; i < p.size(); ++i) {
      double pi = std::clamp(static_cast<double>(p.at(i)), 1e-7, 1.0 - 1e-7);
      double yi = y.at(i);
      if (yi != 0.0f && yi != 1.0f)
        throw std::invalid_argument("covisibility_loss: labels must be 0/1");
      total -= yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double total_loss(double coarse, double fine1, double fine2, double covis,
                  double alpha, double beta, double gamma) {
  return coarse + alpha * fine1 + beta * fine2 + gamma * covis;
}

double finite_diff_check(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& analytic_grad, const std::vector<double>& x,
    double h) {
  if (analytic_grad.size() != x.size())
    throw std::invalid_argument("finite_diff_check: gradient size mismatch");
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");
  double worst = 0.0;
  std::vector<double> probe = x;
  for (size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    double fp = f(probe);
    probe[i] = x[i] - h;
    double fm = f(probe);
    probe[i] = x[i];
    double fd = (fp - fm) / (2.0 * h);
    double denom = std::max({1e-12, std::abs(fd), std::abs(analytic_grad[i])});
    worst = std::max(worst, std::abs(fd - analytic_grad[i]) / denom);
  }
  return worst;
}

}  // namespace comatch
