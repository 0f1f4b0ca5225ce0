#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gridse/estimation.hpp"
#include "gridse/grid_model.hpp"
#include "gridse/nn.hpp"
#include "gridse/powerflow.hpp"

namespace gridse {

// chimera:  two-layer LSTM on [z_t; theta_dc_t], trained on the physics
//           residual plus the gamma-weighted inter-epoch dynamics term.
// lstm_ref: same LSTM stack on z_t alone, physics residual loss only.
// mlp:      feed-forward net on z_t, supervised on ground-truth states.
enum class ModelVariant { chimera, lstm_ref, mlp };

std::string to_string(ModelVariant v);
ModelVariant variant_from_string(const std::string& name);

// Everything an estimator may see at run time: measurements and the DC
// angle estimate derived from them. Ground truth deliberately lives in a
// separate type so the physics-trained variants cannot touch it.
struct EpochFeatures {
    Eigen::VectorXd z;            // m = 2n
    Eigen::VectorXd theta_tilde;  // n, reference entry zero
};

struct FeatureSeries {
    std::vector<EpochFeatures> epochs;

    std::size_t size() const { return epochs.size(); }
};

struct TruthSeries {
    std::vector<StateVector> states;
};

struct TrainConfig {
    ModelVariant variant = ModelVariant::chimera;
    int hidden = 128;
    int lstm_layers = 2;
    int seq_len = 32;
    std::vector<int> mlp_hidden{128, 128, 64};
    double gamma = 1e-3;
    int batch_size = 32;
    int coarse_iters = 150;
    double coarse_lr = 1e-3;
    int fine_iters = 500;
    nn::TriangularSchedule fine_schedule{};
    int val_every = 25;
    std::uint64_t seed = 0;
    // Half-open index ranges into the feature series.
    std::size_t train_begin = 0, train_end = 0;
    std::size_t val_begin = 0, val_end = 0;
};

struct TrainLog {
    std::vector<double> train_loss;                  // per iteration
    std::vector<std::pair<long, double>> val_loss;   // (iteration, loss)
    long best_iteration = -1;
    double best_val_loss = 0.0;
    double seconds = 0.0;
};

struct TrainedModel {
    ModelVariant variant = ModelVariant::chimera;
    nn::LstmNet lstm;  // populated for the recurrent variants
    nn::MlpNet mlp;    // populated for mlp
    int seq_len = 1;
    Eigen::VectorXd input_mean;  // per input feature, train-split statistics
    Eigen::VectorXd input_sd;
    double gamma = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;

    int input_dim() const {
        return variant == ModelVariant::mlp ? mlp.in_dim() : lstm.in_dim();
    }
};

// Mean squared mismatch between received measurements and the measurements
// implied by the estimated state, over all m meters.
double static_loss(const GridCase& grid, const Eigen::VectorXd& z, const StateVector& x_hat);

// Mean squared mismatch between the observed P-injection change and the DC
// prediction H_dc (theta_hat_t - theta_dc_{t-1}), over the n P meters.
// Angle arguments are full n-vectors.
double dynamic_loss(const MatrixBundle& kit, const Eigen::VectorXd& p_t,
                    const Eigen::VectorXd& p_prev, const Eigen::VectorXd& theta_hat,
                    const Eigen::VectorXd& theta_tilde_prev);

// Raw model input for one epoch: [z; theta_tilde] for chimera, z otherwise.
Eigen::VectorXd assemble_input(ModelVariant variant, const EpochFeatures& feats);

// Input window for epoch t, oldest first: epochs t-seq_len+1 .. t, with
// negative indices repeat-padded by epoch 0. Length 1 for mlp.
std::vector<Eigen::VectorXd> assemble_window(const TrainedModel& model,
                                             const FeatureSeries& series, std::size_t t);

// Ground truth is only accepted for the supervised variant; the physics
// losses never see it. Passing truth with a physics variant is an error so
// a caller cannot even accidentally wire it through.
TrainedModel train_model(const GridCase& grid, const MatrixBundle& kit,
                         const FeatureSeries& series, const TruthSeries* truth,
                         const TrainConfig& cfg, TrainLog* log = nullptr);

// Decode per-step raw network outputs into the final state estimate. The
// supervised mlp reads its single raw row as an offset from the nominal
// flat profile. The physics-trained variants read theirs through a fixed
// grid-derived conditioning map that equalizes the curvature the training
// loss shows the optimizer, then close the one weak direction of the
// lossless line model: scaling every voltage while compressing angles
// quadratically moves the predicted measurements only at second order, so a
// pointwise residual pins that coordinate orders of magnitude more weakly
// than the rest of the state. The decode solves a one-dimensional least
// squares over the whole window's measurements for the correction along
// that direction and applies it to the last step's state. z_steps carries
// the m-vector measurements per window step, oldest first; the supervised
// mlp ignores it and decodes its single raw row directly.
StateVector decode_estimate(const GridCase& grid, ModelVariant variant,
                            const std::vector<Eigen::VectorXd>& raw_steps,
                            const std::vector<Eigen::VectorXd>& z_steps);

// Inverse of the decode's per-step affine read-out: the raw output vector
// whose decoded state is exactly x (window closure aside). The raw
// coordinates of the physics variants are not state coordinates, so tests
// and tools that need a raw output hitting a chosen state must go through
// this.
Eigen::VectorXd encode_state(const GridCase& grid, ModelVariant variant, const StateVector& x);

// Batch-mean training loss for the given epochs and per-step raw network
// outputs (one matrix per window step, oldest first, one row per epoch; a
// single matrix for mlp), with its gradient when d_raw is non-null. The
// window length is raw_steps.size(). This is the exact objective
// train_model optimizes, exposed so its gradients can be verified
// independently.
double training_loss(const GridCase& grid, const MatrixBundle& kit, const TrainConfig& cfg,
                     const FeatureSeries& series, const TruthSeries* truth,
                     const std::vector<std::size_t>& epochs,
                     const std::vector<Eigen::MatrixXd>& raw_steps,
                     std::vector<Eigen::MatrixXd>* d_raw = nullptr);

// Estimate from an explicit window of raw inputs (length seq_len, or 1 for
// mlp), decoded via decode_estimate.
StateVector estimate_window(const TrainedModel& model, const GridCase& grid,
                            const std::vector<Eigen::VectorXd>& window);

StateVector estimate(const TrainedModel& model, const GridCase& grid,
                     const FeatureSeries& series, std::size_t t);

// Gradient of d_state . x_hat with respect to the measurement vector z of
// the window's last epoch, through the network, through the decode's
// weak-direction solve, and (for chimera) through the DC estimate feeding
// the input. d_state is packed-state sized (2n-1).
Eigen::VectorXd input_gradient_z(const TrainedModel& model, const GridCase& grid,
                                 const MatrixBundle& kit,
                                 const std::vector<Eigen::VectorXd>& window,
                                 const Eigen::VectorXd& d_state);

void save_model(const std::string& path, const TrainedModel& model);
TrainedModel load_model(const std::string& path);

}  // namespace gridse
