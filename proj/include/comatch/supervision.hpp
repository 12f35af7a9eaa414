#pragma once

#include <array>
#include <functional>
#include <utility>
#include <vector>

#include "comatch/geometry.hpp"
#include "comatch/tensor.hpp"

namespace comatch {

// mean negative log assignment score over the ground-truth cells;
// probabilities floored at 1e-12 before the log
double coarse_loss(const Tensor& assignment,
                   const std::vector<std::pair<int, int>>& gt_matches);

// dual-softmax is applied to the patch correlation first, then the same
// negative log likelihood over ground-truth intra-patch cells
double fine_stage1_loss(const Tensor& patch_correlation,
                        const std::vector<std::pair<int, int>>& gt_cells);

// adaptive clamp radius: 1.5 / (fxA + fyA + fxB + fyB)
double theta_f(const CameraIntrinsics& ka, const CameraIntrinsics& kb);

// per-match epipolar term, summed (not averaged): the Sampson distance d
// when sqrt(d) < theta, the constant theta otherwise. Gradients are with
// respect to (xa, ya, xb, yb) per match and vanish on the clamped branch.
double fine_stage2_loss(const std::vector<Vec2>& pts_a_norm,
                        const std::vector<Vec2>& pts_b_norm, const Mat3& e,
                        double theta,
                        std::vector<std::array<double, 4>>* gradients = nullptr);

// binary cross entropy between predicted covisibility maps and 0/1 labels,
// averaged over every cell of every supplied layer; predictions clipped to
// [1e-7, 1 - 1e-7]
double covisibility_loss(const std::vector<Tensor>& predictions,
                         const std::vector<Tensor>& labels);

double total_loss(double coarse, double fine1, double fine2, double covis,
                  double alpha, double beta, double gamma);

// central-difference gradient checker; returns the worst relative error
// max |fd - analytic| / max(1e-12, |fd|, |analytic|)
double finite_diff_check(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& analytic_grad, const std::vector<double>& x,
    double h);

}  // namespace comatch
