#pragma once

#include <Eigen/Dense>
#include <vector>

#include "gridse/errors.hpp"
#include "gridse/rng.hpp"

namespace gridse::nn {

// Parameter with co-located gradient accumulator.
struct Tensor {
    Eigen::MatrixXd v;
    Eigen::MatrixXd g;

    Tensor() = default;
    Tensor(Eigen::Index rows, Eigen::Index cols)
        : v(Eigen::MatrixXd::Zero(rows, cols)), g(Eigen::MatrixXd::Zero(rows, cols)) {}
};

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) fill. Coefficients are drawn in
// row-major order so the stream layout does not depend on Eigen's storage.
void init_uniform(Eigen::MatrixXd& w, int fan_in, Rng& rng);

// One LSTM layer. Gate blocks are stacked along rows of w/r/b in the order
// input, forget, cell, output:
//   a = [a_i; a_f; a_g; a_o] = w x + r h_prev + b
//   c = sigmoid(a_f) . c_prev + sigmoid(a_i) . tanh(a_g)
//   h = sigmoid(a_o) . tanh(c)
struct LstmLayer {
    int in_dim = 0;
    int hidden = 0;
    Tensor w;  // 4H x D
    Tensor r;  // 4H x H
    Tensor b;  // 4H x 1
};

// Per-step activations kept for backpropagation through time. Batch rows.
struct LstmStepCache {
    Eigen::MatrixXd i, f, g, o;  // gate outputs, B x H
    Eigen::MatrixXd c, tanh_c;   // cell state and its tanh, B x H
    Eigen::MatrixXd h;           // B x H
};

struct LstmCache {
    std::vector<Eigen::MatrixXd> inputs;                // [t], B x D
    std::vector<std::vector<LstmStepCache>> steps;      // [layer][t]
};

// Stacked seq-to-one LSTM with a linear head on the last hidden state.
struct LstmNet {
    std::vector<LstmLayer> layers;
    Tensor w_out;  // out_dim x H
    Tensor b_out;  // out_dim x 1
    int seq_len = 0;

    static LstmNet make(int in_dim, int hidden, int num_layers, int out_dim, int seq_len,
                        Rng& rng);

    int in_dim() const { return layers.empty() ? 0 : layers.front().in_dim; }
    int out_dim() const { return static_cast<int>(w_out.v.rows()); }

    // x_seq: seq_len matrices of B x in_dim. Returns B x out_dim.
    Eigen::MatrixXd forward(const std::vector<Eigen::MatrixXd>& x_seq,
                            LstmCache* cache = nullptr) const;

    // Same pass, but the linear head is applied to every step's top hidden
    // state; element t is the B x out_dim head output after step t.
    std::vector<Eigen::MatrixXd> forward_all(const std::vector<Eigen::MatrixXd>& x_seq,
                                             LstmCache* cache = nullptr) const;

    // Accumulates parameter gradients from d_out (B x out_dim). When
    // d_inputs is given it receives the gradient for every step input.
    void backward(const LstmCache& cache, const Eigen::MatrixXd& d_out,
                  std::vector<Eigen::MatrixXd>* d_inputs = nullptr);

    // Backward for per-step head outputs: d_out_seq carries one B x out_dim
    // gradient block per step, where an empty matrix means that step's head
    // output received no gradient.
    void backward_all(const LstmCache& cache, const std::vector<Eigen::MatrixXd>& d_out_seq,
                      std::vector<Eigen::MatrixXd>* d_inputs = nullptr);

    std::vector<Tensor*> parameters();
    void zero_grad();
};

struct MlpCache {
    std::vector<Eigen::MatrixXd> layer_inputs;  // input to each linear layer
};

// Fully connected net, ReLU on hidden layers, linear output.
struct MlpNet {
    std::vector<Tensor> w;  // per layer, out x in
    std::vector<Tensor> b;  // per layer, out x 1

    static MlpNet make(const std::vector<int>& dims, Rng& rng);

    int in_dim() const { return w.empty() ? 0 : static_cast<int>(w.front().v.cols()); }
    int out_dim() const { return w.empty() ? 0 : static_cast<int>(w.back().v.rows()); }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, MlpCache* cache = nullptr) const;
    void backward(const MlpCache& cache, const Eigen::MatrixXd& d_out,
                  Eigen::MatrixXd* d_input = nullptr);

    std::vector<Tensor*> parameters();
    void zero_grad();
};

// Adam with bias correction; epsilon sits outside the square root.
struct Adam {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long t = 0;
    std::vector<Eigen::MatrixXd> m, v;

    void step(const std::vector<Tensor*>& params, double lr);
};

// Symmetric triangular cyclical schedule: lr_min at the cycle boundaries,
// lr_max at the midpoint.
struct TriangularSchedule {
    double lr_min = 1e-7;
    double lr_max = 1e-4;
    int cycle = 100;

    double at(long iteration) const;
};

}  // namespace gridse::nn
