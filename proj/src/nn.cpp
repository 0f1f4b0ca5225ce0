#include "gridse/nn.hpp"

#include <cmath>

namespace gridse::nn {

namespace {

Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& x) {
    return 1.0 / (1.0 + (-x.array()).exp());
}

}  // namespace

void init_uniform(Eigen::MatrixXd& w, int fan_in, Rng& rng) {
    if (fan_in <= 0) throw InputError("init_uniform needs positive fan_in");
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index row = 0; row < w.rows(); ++row) {
        for (Eigen::Index col = 0; col < w.cols(); ++col) {
            w(row, col) = rng.uniform(-bound, bound);
        }
    }
}

LstmNet LstmNet::make(int in_dim, int hidden, int num_layers, int out_dim, int seq_len,
                      Rng& rng) {
    if (in_dim <= 0 || hidden <= 0 || num_layers <= 0 || out_dim <= 0 || seq_len <= 0) {
        throw InputError("LstmNet::make needs positive dimensions");
    }
    LstmNet net;
    net.seq_len = seq_len;
    for (int l = 0; l < num_layers; ++l) {
        LstmLayer layer;
        layer.in_dim = (l == 0) ? in_dim : hidden;
        layer.hidden = hidden;
        layer.w = Tensor(4 * hidden, layer.in_dim);
        layer.r = Tensor(4 * hidden, hidden);
        layer.b = Tensor(4 * hidden, 1);
        init_uniform(layer.w.v, layer.in_dim, rng);
        init_uniform(layer.r.v, hidden, rng);
        // Forget-gate bias starts at 1 so early training does not flush the
        // cell state; everything else starts at 0.
        layer.b.v.block(hidden, 0, hidden, 1).setOnes();
        net.layers.push_back(std::move(layer));
    }
    net.w_out = Tensor(out_dim, hidden);
    net.b_out = Tensor(out_dim, 1);
    init_uniform(net.w_out.v, hidden, rng);
    return net;
}

Eigen::MatrixXd LstmNet::forward(const std::vector<Eigen::MatrixXd>& x_seq,
                                 LstmCache* cache) const {
    return forward_all(x_seq, cache).back();
}

std::vector<Eigen::MatrixXd> LstmNet::forward_all(const std::vector<Eigen::MatrixXd>& x_seq,
                                                  LstmCache* cache) const {
    if (static_cast<int>(x_seq.size()) != seq_len) {
        throw InputError("forward expects a sequence of length " + std::to_string(seq_len));
    }
    const Eigen::Index batch = x_seq.front().rows();
    const std::size_t num_layers = layers.size();

    if (cache) {
        cache->inputs = x_seq;
        cache->steps.assign(num_layers, {});
        for (auto& per_layer : cache->steps) {
            per_layer.resize(static_cast<std::size_t>(seq_len));
        }
    }

    std::vector<Eigen::MatrixXd> h(num_layers), c(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) {
        h[l] = Eigen::MatrixXd::Zero(batch, layers[l].hidden);
        c[l] = Eigen::MatrixXd::Zero(batch, layers[l].hidden);
    }

    std::vector<Eigen::MatrixXd> outputs;
    outputs.reserve(static_cast<std::size_t>(seq_len));

    for (int t = 0; t < seq_len; ++t) {
        const Eigen::MatrixXd* below = &x_seq[static_cast<std::size_t>(t)];
        for (std::size_t l = 0; l < num_layers; ++l) {
            const LstmLayer& layer = layers[l];
            const int hs = layer.hidden;
            if (below->cols() != layer.in_dim) {
                throw InputError("layer " + std::to_string(l) + " expects input width " +
                                 std::to_string(layer.in_dim) + ", got " +
                                 std::to_string(below->cols()));
            }

            Eigen::MatrixXd a = (*below) * layer.w.v.transpose() + h[l] * layer.r.v.transpose();
            a.rowwise() += layer.b.v.col(0).transpose();

            LstmStepCache step;
            step.i = sigmoid(a.leftCols(hs));
            step.f = sigmoid(a.middleCols(hs, hs));
            step.g = a.middleCols(2 * hs, hs).array().tanh();
            step.o = sigmoid(a.rightCols(hs));
            step.c = step.f.cwiseProduct(c[l]) + step.i.cwiseProduct(step.g);
            step.tanh_c = step.c.array().tanh();
            step.h = step.o.cwiseProduct(step.tanh_c);

            h[l] = step.h;
            c[l] = step.c;
            if (cache) {
                cache->steps[l][static_cast<std::size_t>(t)] = std::move(step);
                below = &cache->steps[l][static_cast<std::size_t>(t)].h;
            } else {
                // Without a cache only the running h/c are needed.
                below = &h[l];
            }
        }
        Eigen::MatrixXd y = h.back() * w_out.v.transpose();
        y.rowwise() += b_out.v.col(0).transpose();
        outputs.push_back(std::move(y));
    }
    return outputs;
}

void LstmNet::backward(const LstmCache& cache, const Eigen::MatrixXd& d_out,
                       std::vector<Eigen::MatrixXd>* d_inputs) {
    std::vector<Eigen::MatrixXd> d_out_seq(static_cast<std::size_t>(seq_len));
    d_out_seq.back() = d_out;
    backward_all(cache, d_out_seq, d_inputs);
}

void LstmNet::backward_all(const LstmCache& cache, const std::vector<Eigen::MatrixXd>& d_out_seq,
                           std::vector<Eigen::MatrixXd>* d_inputs) {
    const std::size_t num_layers = layers.size();
    const int T = seq_len;
    if (static_cast<int>(d_out_seq.size()) != T) {
        throw InputError("backward expects one head gradient slot per step");
    }
    const Eigen::Index batch = cache.inputs.front().rows();

    // dh[l] is the gradient flowing into layer l's hidden state at the step
    // currently being processed; the top layer picks up each step's head
    // gradient as the reverse sweep reaches that step.
    if (d_inputs) {
        d_inputs->assign(static_cast<std::size_t>(T), Eigen::MatrixXd());
    }

    std::vector<Eigen::MatrixXd> dh(num_layers), dc(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) {
        dh[l] = Eigen::MatrixXd::Zero(batch, layers[l].hidden);
        dc[l] = Eigen::MatrixXd::Zero(batch, layers[l].hidden);
    }

    for (int t = T - 1; t >= 0; --t) {
        const Eigen::MatrixXd& d_y = d_out_seq[static_cast<std::size_t>(t)];
        if (d_y.size() != 0) {
            const Eigen::MatrixXd& h_top =
                cache.steps[num_layers - 1][static_cast<std::size_t>(t)].h;
            w_out.g += d_y.transpose() * h_top;
            b_out.g.col(0) += d_y.colwise().sum().transpose();
            dh[num_layers - 1] += d_y * w_out.v;
        }
        // Top-down within a step: layer l's input gradient feeds layer l-1's
        // hidden gradient at the same time step.
        for (std::size_t li = num_layers; li-- > 0;) {
            LstmLayer& layer = layers[li];
            const int hs = layer.hidden;
            const LstmStepCache& step = cache.steps[li][static_cast<std::size_t>(t)];
            const Eigen::MatrixXd& x_t =
                (li == 0) ? cache.inputs[static_cast<std::size_t>(t)]
                          : cache.steps[li - 1][static_cast<std::size_t>(t)].h;
            const Eigen::MatrixXd c_prev =
                (t == 0) ? Eigen::MatrixXd::Zero(batch, hs)
                         : cache.steps[li][static_cast<std::size_t>(t - 1)].c;
            const Eigen::MatrixXd h_prev =
                (t == 0) ? Eigen::MatrixXd::Zero(batch, hs)
                         : cache.steps[li][static_cast<std::size_t>(t - 1)].h;

            const Eigen::ArrayXXd dho = dh[li].array();
            const Eigen::ArrayXXd d_o = dho * step.tanh_c.array();
            const Eigen::ArrayXXd dcv =
                dc[li].array() + dho * step.o.array() * (1.0 - step.tanh_c.array().square());
            const Eigen::ArrayXXd d_i = dcv * step.g.array();
            const Eigen::ArrayXXd d_f = dcv * c_prev.array();
            const Eigen::ArrayXXd d_g = dcv * step.i.array();

            Eigen::MatrixXd da(batch, 4 * hs);
            da.leftCols(hs) = (d_i * step.i.array() * (1.0 - step.i.array())).matrix();
            da.middleCols(hs, hs) = (d_f * step.f.array() * (1.0 - step.f.array())).matrix();
            da.middleCols(2 * hs, hs) = (d_g * (1.0 - step.g.array().square())).matrix();
            da.rightCols(hs) = (d_o * step.o.array() * (1.0 - step.o.array())).matrix();

            layer.w.g += da.transpose() * x_t;
            layer.r.g += da.transpose() * h_prev;
            layer.b.g.col(0) += da.colwise().sum().transpose();

            // Gradients for the previous time step of this layer.
            dh[li] = da * layer.r.v;
            dc[li] = (dcv * step.f.array()).matrix();

            const Eigen::MatrixXd dx = da * layer.w.v;
            if (li == 0) {
                if (d_inputs) (*d_inputs)[static_cast<std::size_t>(t)] = dx;
            } else {
                // The layer below sees this as extra hidden-state gradient
                // at the same step, on top of what time t+1 sent back.
                dh[li - 1] += dx;
            }
        }
    }
}

std::vector<Tensor*> LstmNet::parameters() {
    std::vector<Tensor*> params;
    for (LstmLayer& layer : layers) {
        params.push_back(&layer.w);
        params.push_back(&layer.r);
        params.push_back(&layer.b);
    }
    params.push_back(&w_out);
    params.push_back(&b_out);
    return params;
}

void LstmNet::zero_grad() {
    for (Tensor* p : parameters()) p->g.setZero();
}

MlpNet MlpNet::make(const std::vector<int>& dims, Rng& rng) {
    if (dims.size() < 2) throw InputError("MlpNet::make needs at least input and output dims");
    MlpNet net;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        if (dims[l] <= 0 || dims[l + 1] <= 0) throw InputError("MlpNet::make needs positive dims");
        Tensor w(dims[l + 1], dims[l]);
        Tensor b(dims[l + 1], 1);
        init_uniform(w.v, dims[l], rng);
        net.w.push_back(std::move(w));
        net.b.push_back(std::move(b));
    }
    return net;
}

Eigen::MatrixXd MlpNet::forward(const Eigen::MatrixXd& x, MlpCache* cache) const {
    if (cache) {
        cache->layer_inputs.clear();
    }
    Eigen::MatrixXd a = x;
    for (std::size_t l = 0; l < w.size(); ++l) {
        if (cache) cache->layer_inputs.push_back(a);
        a = a * w[l].v.transpose();
        a.rowwise() += b[l].v.col(0).transpose();
        if (l + 1 < w.size()) a = a.cwiseMax(0.0);
    }
    return a;
}

void MlpNet::backward(const MlpCache& cache, const Eigen::MatrixXd& d_out,
                      Eigen::MatrixXd* d_input) {
    Eigen::MatrixXd d = d_out;
    for (std::size_t l = w.size(); l-- > 0;) {
        const Eigen::MatrixXd& x_l = cache.layer_inputs[l];
        if (l + 1 < w.size()) {
            // ReLU mask of this layer's output, recomputed from its input.
            Eigen::MatrixXd pre = x_l * w[l].v.transpose();
            pre.rowwise() += b[l].v.col(0).transpose();
            d = d.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
        }
        w[l].g += d.transpose() * x_l;
        b[l].g.col(0) += d.colwise().sum().transpose();
        if (l > 0 || d_input) {
            Eigen::MatrixXd dx = d * w[l].v;
            if (l == 0) {
                if (d_input) *d_input = dx;
            } else {
                d = std::move(dx);
            }
        }
    }
}

std::vector<Tensor*> MlpNet::parameters() {
    std::vector<Tensor*> params;
    for (std::size_t l = 0; l < w.size(); ++l) {
        params.push_back(&w[l]);
        params.push_back(&b[l]);
    }
    return params;
}

void MlpNet::zero_grad() {
    for (Tensor* p : parameters()) p->g.setZero();
}

void Adam::step(const std::vector<Tensor*>& params, double lr) {
    if (m.empty()) {
        m.reserve(params.size());
        v.reserve(params.size());
        for (const Tensor* p : params) {
            m.push_back(Eigen::MatrixXd::Zero(p->v.rows(), p->v.cols()));
            v.push_back(Eigen::MatrixXd::Zero(p->v.rows(), p->v.cols()));
        }
    }
    if (m.size() != params.size()) {
        throw InputError("Adam::step called with a different parameter set");
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        m[k] = beta1 * m[k] + (1.0 - beta1) * p.g;
        v[k] = beta2 * v[k].array().matrix() + (1.0 - beta2) * p.g.cwiseProduct(p.g);
        const Eigen::ArrayXXd m_hat = m[k].array() / bc1;
        const Eigen::ArrayXXd v_hat = v[k].array() / bc2;
        p.v.array() -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

double TriangularSchedule::at(long iteration) const {
    if (cycle <= 1) return lr_max;
    const long pos = iteration % cycle;
    const double half = static_cast<double>(cycle) / 2.0;
    const double frac = (static_cast<double>(pos) <= half)
                            ? static_cast<double>(pos) / half
                            : (static_cast<double>(cycle - pos)) / half;
    return lr_min + (lr_max - lr_min) * frac;
}

}  // namespace gridse::nn
