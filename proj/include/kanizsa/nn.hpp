#pragma once

// Minimal CNN stack: Conv / ReLU / MaxPool2 / Flatten / Dense layers with a
// softmax cross-entropy head, plain SGD (fixed learning rate, no momentum),
// He-normal initialization, a deterministic training loop with seeded
// per-epoch shuffles, and a binary checkpoint format.
//
// Everything is templated on the scalar type: float for training speed,
// double for gradient checking and bit-deterministic reference runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "kanizsa/common.hpp"
#include "kanizsa/dataset.hpp"
#include "kanizsa/mnist.hpp"
#include "kanizsa/parallel.hpp"
#include "kanizsa/rng.hpp"
#include "kanizsa/tensor.hpp"

namespace kanizsa::nn {

struct Shape3 {
    int c = 0, h = 0, w = 0;
    size_t count() const { return static_cast<size_t>(c) * h * w; }
    bool operator==(const Shape3&) const = default;
};

// ---------------------------------------------------------------------------
// Network description
// ---------------------------------------------------------------------------

struct LayerSpec {
    enum class Type { Conv, ReLU, MaxPool, Flatten, Dense };
    Type type = Type::ReLU;
    int out_channels = 0;  // Conv
    int kernel = 0;        // Conv
    int stride = 1;        // Conv
    int out_features = 0;  // Dense
};

struct NetworkSpec {
    int in_channels = 1;
    int in_height = 0;
    int in_width = 0;
    std::vector<LayerSpec> layers;

    int num_classes() const {
        for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
            if (it->type == LayerSpec::Type::Dense) return it->out_features;
        }
        return 0;
    }

    std::string describe() const {
        std::string s = "in:" + std::to_string(in_channels) + "x" + std::to_string(in_height) +
                        "x" + std::to_string(in_width);
        for (const auto& l : layers) {
            s += ';';
            switch (l.type) {
                case LayerSpec::Type::Conv:
                    s += "conv:" + std::to_string(l.out_channels) + "," +
                         std::to_string(l.kernel) + "," + std::to_string(l.stride);
                    break;
                case LayerSpec::Type::ReLU: s += "relu"; break;
                case LayerSpec::Type::MaxPool: s += "maxpool2"; break;
                case LayerSpec::Type::Flatten: s += "flatten"; break;
                case LayerSpec::Type::Dense:
                    s += "dense:" + std::to_string(l.out_features);
                    break;
            }
        }
        return s;
    }

    static NetworkSpec parse(const std::string& desc) {
        NetworkSpec spec;
        size_t pos = 0;
        bool first = true;
        while (pos <= desc.size()) {
            size_t next = desc.find(';', pos);
            std::string tok = desc.substr(pos, next == std::string::npos ? next : next - pos);
            pos = next == std::string::npos ? desc.size() + 1 : next + 1;
            if (tok.empty()) continue;
            if (first) {
                if (tok.rfind("in:", 0) != 0 ||
                    std::sscanf(tok.c_str(), "in:%dx%dx%d", &spec.in_channels, &spec.in_height,
                                &spec.in_width) != 3) {
                    throw FormatError("network descriptor must start with in:CxHxW");
                }
                first = false;
                continue;
            }
            LayerSpec l;
            if (tok.rfind("conv:", 0) == 0) {
                l.type = LayerSpec::Type::Conv;
                if (std::sscanf(tok.c_str(), "conv:%d,%d,%d", &l.out_channels, &l.kernel,
                                &l.stride) != 3) {
                    throw FormatError("bad conv token: " + tok);
                }
            } else if (tok == "relu") {
                l.type = LayerSpec::Type::ReLU;
            } else if (tok == "maxpool2") {
                l.type = LayerSpec::Type::MaxPool;
            } else if (tok == "flatten") {
                l.type = LayerSpec::Type::Flatten;
            } else if (tok.rfind("dense:", 0) == 0) {
                l.type = LayerSpec::Type::Dense;
                if (std::sscanf(tok.c_str(), "dense:%d", &l.out_features) != 1) {
                    throw FormatError("bad dense token: " + tok);
                }
            } else {
                throw FormatError("unknown layer token: " + tok);
            }
            spec.layers.push_back(l);
        }
        if (first) throw FormatError("empty network descriptor");
        return spec;
    }

    /// The default classifier: three conv/pool stages and a 128-wide hidden
    /// dense layer in front of the class head.
    static NetworkSpec default_conv(int height, int width, int classes) {
        NetworkSpec spec;
        spec.in_channels = 1;
        spec.in_height = height;
        spec.in_width = width;
        auto conv = [](int oc, int k) {
            return LayerSpec{LayerSpec::Type::Conv, oc, k, 1, 0};
        };
        auto plain = [](LayerSpec::Type t) { return LayerSpec{t, 0, 0, 1, 0}; };
        spec.layers = {conv(16, 5),
                       plain(LayerSpec::Type::ReLU),
                       plain(LayerSpec::Type::MaxPool),
                       conv(32, 5),
                       plain(LayerSpec::Type::ReLU),
                       plain(LayerSpec::Type::MaxPool),
                       conv(64, 3),
                       plain(LayerSpec::Type::ReLU),
                       plain(LayerSpec::Type::MaxPool),
                       plain(LayerSpec::Type::Flatten),
                       LayerSpec{LayerSpec::Type::Dense, 0, 0, 1, 128},
                       plain(LayerSpec::Type::ReLU),
                       LayerSpec{LayerSpec::Type::Dense, 0, 0, 1, classes}};
        return spec;
    }
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Workspace {
    std::vector<Tensor<T>> acts;   // acts[i] = output of layer i
    std::vector<Tensor<T>> dacts;  // gradient buffers, same shapes
    std::vector<std::vector<std::uint8_t>> pool_codes;  // maxpool argmax per layer
    std::vector<T> cols;    // im2col buffer (one sample)
    std::vector<T> dcols;   // column gradients (one sample)
    std::vector<T> wt;      // transposed-weight scratch
    Tensor<T> input;        // per-thread gathered batch
    Tensor<T> dlogits;      // loss gradient at the head
};

template <typename T>
struct Gradients {
    std::vector<std::vector<T>> w;  // per layer (empty when the layer has no params)
    std::vector<std::vector<T>> b;

    void zero() {
        for (auto& g : w) std::fill(g.begin(), g.end(), T(0));
        for (auto& g : b) std::fill(g.begin(), g.end(), T(0));
    }

    void add(const Gradients& o) {
        for (size_t i = 0; i < w.size(); ++i) {
            for (size_t j = 0; j < w[i].size(); ++j) w[i][j] += o.w[i][j];
            for (size_t j = 0; j < b[i].size(); ++j) b[i][j] += o.b[i][j];
        }
    }
};

template <typename T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual const LayerSpec& spec() const = 0;
    virtual Shape3 out_shape() const = 0;
    virtual void forward(const Tensor<T>& in, Tensor<T>& out, Workspace<T>& ws, int slot) const = 0;
    // din may be null for the first layer. gw/gb are null for parameter-free layers.
    virtual void backward(const Tensor<T>& in, const Tensor<T>& dout, Tensor<T>* din,
                          Workspace<T>& ws, int slot, std::vector<T>* gw,
                          std::vector<T>* gb) const = 0;
    virtual std::vector<T>* weights() { return nullptr; }
    virtual std::vector<T>* bias() { return nullptr; }
    virtual const std::vector<T>* weights() const { return nullptr; }
    virtual const std::vector<T>* bias() const { return nullptr; }
};

template <typename T>
class ConvLayer final : public Layer<T> {
public:
    ConvLayer(const LayerSpec& spec, Shape3 in, SplitMix64& rng) : spec_(spec), in_(in) {
        if (spec.kernel <= 0 || spec.stride <= 0 || spec.out_channels <= 0) {
            throw ShapeMismatch("conv: bad kernel/stride/channels");
        }
        if (in.h < spec.kernel || in.w < spec.kernel) {
            throw ShapeMismatch("conv: kernel larger than input");
        }
        out_ = {spec.out_channels, (in.h - spec.kernel) / spec.stride + 1,
                (in.w - spec.kernel) / spec.stride + 1};
        k_dim_ = spec.kernel * spec.kernel * in.c;
        // Channels-last weights: w2[k][oc], k = (kh*KW + kw)*IC + ic.
        w2_.resize(static_cast<size_t>(k_dim_) * out_.c);
        b_.assign(out_.c, T(0));
        T std_dev = std::sqrt(T(2) / static_cast<T>(k_dim_));
        for (auto& x : w2_) x = static_cast<T>(rng.gaussian()) * std_dev;
    }

    const LayerSpec& spec() const override { return spec_; }
    Shape3 out_shape() const override { return out_; }

    void forward(const Tensor<T>& in, Tensor<T>& out, Workspace<T>& ws, int) const override {
        out.reshape(in.n, out_.c, out_.h, out_.w);
        const int p_count = out_.h * out_.w;
        for (int s = 0; s < in.n; ++s) {
            im2col(in.sample(s), ws.cols.data());
            gemm_bias(ws.cols.data(), w2_.data(), b_.data(), out.sample(s), p_count, k_dim_,
                      out_.c);
        }
    }

    void backward(const Tensor<T>& in, const Tensor<T>& dout, Tensor<T>* din, Workspace<T>& ws,
                  int, std::vector<T>* gw, std::vector<T>* gb) const override {
        const int p_count = out_.h * out_.w;
        const int oc = out_.c;
        if (din) {
            din->reshape(in.n, in_.c, in_.h, in_.w);
            din->zero();
            // wt[oc][k]: transpose of w2, built once per call.
            ws.wt.resize(w2_.size());
            for (int k = 0; k < k_dim_; ++k) {
                for (int o = 0; o < oc; ++o) {
                    ws.wt[static_cast<size_t>(o) * k_dim_ + k] =
                        w2_[static_cast<size_t>(k) * oc + o];
                }
            }
        }
        for (int s = 0; s < in.n; ++s) {
            const T* dout_s = dout.sample(s);
            im2col(in.sample(s), ws.cols.data());
            gemm_at_b_accum(ws.cols.data(), dout_s, gw->data(), p_count, k_dim_, oc);
            for (int p = 0; p < p_count; ++p) {
                const T* row = dout_s + static_cast<size_t>(p) * oc;
                for (int o = 0; o < oc; ++o) (*gb)[o] += row[o];
            }
            if (din) {
                gemm_bias(dout_s, ws.wt.data(), nullptr, ws.dcols.data(), p_count, oc, k_dim_);
                col2im_add(ws.dcols.data(), din->sample(s));
            }
        }
    }

    std::vector<T>* weights() override { return &w2_; }
    std::vector<T>* bias() override { return &b_; }
    const std::vector<T>* weights() const override { return &w2_; }
    const std::vector<T>* bias() const override { return &b_; }

    int col_elems() const { return (out_.h * out_.w) * k_dim_; }

private:
    void im2col(const T* x, T* cols) const {
        const int kw_ic = spec_.kernel * in_.c;
        T* crow = cols;
        for (int oh = 0; oh < out_.h; ++oh) {
            for (int ow = 0; ow < out_.w; ++ow) {
                for (int kh = 0; kh < spec_.kernel; ++kh) {
                    const T* src = x + (static_cast<size_t>(oh * spec_.stride + kh) * in_.w +
                                        ow * spec_.stride) *
                                           in_.c;
                    std::copy_n(src, kw_ic, crow);
                    crow += kw_ic;
                }
            }
        }
    }

    void col2im_add(const T* dcols, T* dx) const {
        const int kw_ic = spec_.kernel * in_.c;
        const T* crow = dcols;
        for (int oh = 0; oh < out_.h; ++oh) {
            for (int ow = 0; ow < out_.w; ++ow) {
                for (int kh = 0; kh < spec_.kernel; ++kh) {
                    T* dst = dx + (static_cast<size_t>(oh * spec_.stride + kh) * in_.w +
                                   ow * spec_.stride) *
                                      in_.c;
                    for (int i = 0; i < kw_ic; ++i) dst[i] += crow[i];
                    crow += kw_ic;
                }
            }
        }
    }

    LayerSpec spec_;
    Shape3 in_, out_;
    int k_dim_ = 0;
    std::vector<T> w2_, b_;
};

template <typename T>
class ReluLayer final : public Layer<T> {
public:
    ReluLayer(const LayerSpec& spec, Shape3 in) : spec_(spec), shape_(in) {}
    const LayerSpec& spec() const override { return spec_; }
    Shape3 out_shape() const override { return shape_; }

    void forward(const Tensor<T>& in, Tensor<T>& out, Workspace<T>&, int) const override {
        out.reshape(in.n, in.c, in.h, in.w);
        for (size_t i = 0; i < in.size(); ++i) out.v[i] = in.v[i] > T(0) ? in.v[i] : T(0);
    }

    void backward(const Tensor<T>& in, const Tensor<T>& dout, Tensor<T>* din, Workspace<T>&, int,
                  std::vector<T>*, std::vector<T>*) const override {
        if (!din) return;
        din->reshape(in.n, in.c, in.h, in.w);
        for (size_t i = 0; i < in.size(); ++i) din->v[i] = in.v[i] > T(0) ? dout.v[i] : T(0);
    }

private:
    LayerSpec spec_;
    Shape3 shape_;
};

template <typename T>
class MaxPoolLayer final : public Layer<T> {
public:
    MaxPoolLayer(const LayerSpec& spec, Shape3 in) : spec_(spec), in_(in) {
        if (in.h < 2 || in.w < 2) throw ShapeMismatch("maxpool: input smaller than window");
        out_ = {in.c, in.h / 2, in.w / 2};
    }
    const LayerSpec& spec() const override { return spec_; }
    Shape3 out_shape() const override { return out_; }

    void forward(const Tensor<T>& in, Tensor<T>& out, Workspace<T>& ws, int slot) const override {
        out.reshape(in.n, out_.c, out_.h, out_.w);
        auto& codes = ws.pool_codes[slot];
        codes.resize(out.size());
        const int c = in_.c;
        for (int s = 0; s < in.n; ++s) {
            const T* x = in.sample(s);
            T* y = out.sample(s);
            std::uint8_t* code = codes.data() + static_cast<size_t>(s) * out_.count();
            for (int oh = 0; oh < out_.h; ++oh) {
                for (int ow = 0; ow < out_.w; ++ow) {
                    const T* cell[4] = {
                        x + (static_cast<size_t>(2 * oh) * in_.w + 2 * ow) * c,
                        x + (static_cast<size_t>(2 * oh) * in_.w + 2 * ow + 1) * c,
                        x + (static_cast<size_t>(2 * oh + 1) * in_.w + 2 * ow) * c,
                        x + (static_cast<size_t>(2 * oh + 1) * in_.w + 2 * ow + 1) * c};
                    T* yrow = y + (static_cast<size_t>(oh) * out_.w + ow) * c;
                    std::uint8_t* crow = code + (static_cast<size_t>(oh) * out_.w + ow) * c;
                    for (int ch = 0; ch < c; ++ch) {
                        T best = cell[0][ch];
                        std::uint8_t which = 0;
                        for (std::uint8_t q = 1; q < 4; ++q) {
                            if (cell[q][ch] > best) {  // ties keep the first occurrence
                                best = cell[q][ch];
                                which = q;
                            }
                        }
                        yrow[ch] = best;
                        crow[ch] = which;
                    }
                }
            }
        }
    }

    void backward(const Tensor<T>& in, const Tensor<T>& dout, Tensor<T>* din, Workspace<T>& ws,
                  int slot, std::vector<T>*, std::vector<T>*) const override {
        if (!din) return;
        din->reshape(in.n, in_.c, in_.h, in_.w);
        din->zero();
        const auto& codes = ws.pool_codes[slot];
        const int c = in_.c;
        for (int s = 0; s < in.n; ++s) {
            const T* dy = dout.sample(s);
            T* dx = din->sample(s);
            const std::uint8_t* code = codes.data() + static_cast<size_t>(s) * out_.count();
            for (int oh = 0; oh < out_.h; ++oh) {
                for (int ow = 0; ow < out_.w; ++ow) {
                    const T* dyrow = dy + (static_cast<size_t>(oh) * out_.w + ow) * c;
                    const std::uint8_t* crow = code + (static_cast<size_t>(oh) * out_.w + ow) * c;
                    for (int ch = 0; ch < c; ++ch) {
                        int dy_ = crow[ch] >> 1;
                        int dx_ = crow[ch] & 1;
                        dx[(static_cast<size_t>(2 * oh + dy_) * in_.w + 2 * ow + dx_) * c + ch] +=
                            dyrow[ch];
                    }
                }
            }
        }
    }

private:
    LayerSpec spec_;
    Shape3 in_, out_;
};

template <typename T>
class FlattenLayer final : public Layer<T> {
public:
    FlattenLayer(const LayerSpec& spec, Shape3 in)
        : spec_(spec), out_{static_cast<int>(in.count()), 1, 1} {}
    const LayerSpec& spec() const override { return spec_; }
    Shape3 out_shape() const override { return out_; }

    void forward(const Tensor<T>& in, Tensor<T>& out, Workspace<T>&, int) const override {
        out.reshape(in.n, out_.c, 1, 1);
        std::copy(in.v.begin(), in.v.begin() + in.size(), out.v.begin());
    }

    void backward(const Tensor<T>& in, const Tensor<T>& dout, Tensor<T>* din, Workspace<T>&, int,
                  std::vector<T>*, std::vector<T>*) const override {
        if (!din) return;
        din->reshape(in.n, in.c, in.h, in.w);
        std::copy(dout.v.begin(), dout.v.begin() + dout.size(), din->v.begin());
    }

private:
    LayerSpec spec_;
    Shape3 out_;
};

template <typename T>
class DenseLayer final : public Layer<T> {
public:
    DenseLayer(const LayerSpec& spec, Shape3 in, SplitMix64& rng) : spec_(spec) {
        if (in.h != 1 || in.w != 1) throw ShapeMismatch("dense requires flattened input");
        if (spec.out_features <= 0) throw ShapeMismatch("dense: bad output width");
        in_features_ = in.c;
        out_ = {spec.out_features, 1, 1};
        w2_.resize(static_cast<size_t>(in_features_) * out_.c);  // w2[f][o]
        b_.assign(out_.c, T(0));
        T std_dev = std::sqrt(T(2) / static_cast<T>(in_features_));
        for (auto& x : w2_) x = static_cast<T>(rng.gaussian()) * std_dev;
    }

    const LayerSpec& spec() const override { return spec_; }
    Shape3 out_shape() const override { return out_; }

    void forward(const Tensor<T>& in, Tensor<T>& out, Workspace<T>&, int) const override {
        out.reshape(in.n, out_.c, 1, 1);
        gemm_bias(in.v.data(), w2_.data(), b_.data(), out.v.data(), in.n, in_features_, out_.c);
    }

    void backward(const Tensor<T>& in, const Tensor<T>& dout, Tensor<T>* din, Workspace<T>& ws,
                  int, std::vector<T>* gw, std::vector<T>* gb) const override {
        gemm_at_b_accum(in.v.data(), dout.v.data(), gw->data(), in.n, in_features_, out_.c);
        for (int s = 0; s < in.n; ++s) {
            const T* row = dout.sample(s);
            for (int o = 0; o < out_.c; ++o) (*gb)[o] += row[o];
        }
        if (din) {
            din->reshape(in.n, in_features_, 1, 1);
            ws.wt.resize(w2_.size());
            for (int f = 0; f < in_features_; ++f) {
                for (int o = 0; o < out_.c; ++o) {
                    ws.wt[static_cast<size_t>(o) * in_features_ + f] =
                        w2_[static_cast<size_t>(f) * out_.c + o];
                }
            }
            gemm_bias(dout.v.data(), ws.wt.data(), nullptr, din->v.data(), in.n, out_.c,
                      in_features_);
        }
    }

    std::vector<T>* weights() override { return &w2_; }
    std::vector<T>* bias() override { return &b_; }
    const std::vector<T>* weights() const override { return &w2_; }
    const std::vector<T>* bias() const override { return &b_; }

private:
    LayerSpec spec_;
    Shape3 out_;
    int in_features_ = 0;
    std::vector<T> w2_, b_;
};

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

template <typename T>
class Network {
public:
    explicit Network(const NetworkSpec& spec, std::uint64_t init_seed = 1) : spec_(spec) {
        if (spec.in_channels <= 0 || spec.in_height <= 0 || spec.in_width <= 0) {
            throw ShapeMismatch("network: bad input shape");
        }
        Shape3 shape{spec.in_channels, spec.in_height, spec.in_width};
        int layer_index = 0;
        for (const auto& l : spec.layers) {
            SplitMix64 rng(derive_seed(init_seed, 7, static_cast<std::uint64_t>(layer_index)));
            switch (l.type) {
                case LayerSpec::Type::Conv:
                    layers_.push_back(std::make_unique<ConvLayer<T>>(l, shape, rng));
                    break;
                case LayerSpec::Type::ReLU:
                    layers_.push_back(std::make_unique<ReluLayer<T>>(l, shape));
                    break;
                case LayerSpec::Type::MaxPool:
                    layers_.push_back(std::make_unique<MaxPoolLayer<T>>(l, shape));
                    break;
                case LayerSpec::Type::Flatten:
                    layers_.push_back(std::make_unique<FlattenLayer<T>>(l, shape));
                    break;
                case LayerSpec::Type::Dense:
                    layers_.push_back(std::make_unique<DenseLayer<T>>(l, shape, rng));
                    break;
            }
            shape = layers_.back()->out_shape();
            ++layer_index;
        }
        out_shape_ = shape;
        if (out_shape_.h != 1 || out_shape_.w != 1) {
            throw ShapeMismatch("network must end in a dense head");
        }
    }

    const NetworkSpec& spec() const { return spec_; }
    Shape3 input_shape() const { return {spec_.in_channels, spec_.in_height, spec_.in_width}; }
    int num_classes() const { return out_shape_.c; }
    size_t layer_count() const { return layers_.size(); }

    Workspace<T> make_workspace() const {
        Workspace<T> ws;
        ws.acts.resize(layers_.size());
        ws.dacts.resize(layers_.size());
        ws.pool_codes.resize(layers_.size());
        size_t max_cols = 1;
        for (const auto& l : layers_) {
            if (auto* conv = dynamic_cast<const ConvLayer<T>*>(l.get())) {
                max_cols = std::max(max_cols, static_cast<size_t>(conv->col_elems()));
            }
        }
        ws.cols.resize(max_cols);
        ws.dcols.resize(max_cols);
        return ws;
    }

    Gradients<T> make_gradients() const {
        Gradients<T> g;
        g.w.resize(layers_.size());
        g.b.resize(layers_.size());
        for (size_t i = 0; i < layers_.size(); ++i) {
            if (const auto* w = layers_[i]->weights()) g.w[i].assign(w->size(), T(0));
            if (const auto* b = layers_[i]->bias()) g.b[i].assign(b->size(), T(0));
        }
        return g;
    }

    /// Forward the whole batch; the returned logits live in ws.
    const Tensor<T>& forward(const Tensor<T>& input, Workspace<T>& ws) const {
        if (input.c != spec_.in_channels || input.h != spec_.in_height ||
            input.w != spec_.in_width) {
            throw ShapeMismatch("forward: input shape does not match network");
        }
        const Tensor<T>* cur = &input;
        for (size_t i = 0; i < layers_.size(); ++i) {
            layers_[i]->forward(*cur, ws.acts[i], ws, static_cast<int>(i));
            cur = &ws.acts[i];
        }
        return *cur;
    }

    /// Backward from dlogits (gradient of the loss at the head); accumulates
    /// parameter gradients into g. forward() must have run on `input` first.
    void backward(const Tensor<T>& input, const Tensor<T>& dlogits, Workspace<T>& ws,
                  Gradients<T>& g) const {
        const Tensor<T>* dout = &dlogits;
        for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
            const Tensor<T>& in = i == 0 ? input : ws.acts[i - 1];
            Tensor<T>* din = i == 0 ? nullptr : &ws.dacts[i - 1];
            std::vector<T>* gw = g.w[i].empty() ? nullptr : &g.w[i];
            std::vector<T>* gb = g.b[i].empty() ? nullptr : &g.b[i];
            layers_[i]->backward(in, *dout, din, ws, i, gw, gb);
            dout = din;
        }
    }

    /// Plain SGD: p <- p - lr*g. No momentum, decay or schedule.
    void sgd_step(const Gradients<T>& g, T lr) {
        for (size_t i = 0; i < layers_.size(); ++i) {
            if (auto* w = layers_[i]->weights()) {
                for (size_t j = 0; j < w->size(); ++j) (*w)[j] -= lr * g.w[i][j];
            }
            if (auto* b = layers_[i]->bias()) {
                for (size_t j = 0; j < b->size(); ++j) (*b)[j] -= lr * g.b[i][j];
            }
        }
    }

    size_t parameter_count() const {
        size_t total = 0;
        for (const auto& l : layers_) {
            if (const auto* w = l->weights()) total += w->size();
            if (const auto* b = l->bias()) total += b->size();
        }
        return total;
    }

    /// Parameters in layer order, weights before bias within a layer.
    void get_parameters(std::vector<T>& out) const {
        out.clear();
        out.reserve(parameter_count());
        for (const auto& l : layers_) {
            if (const auto* w = l->weights()) out.insert(out.end(), w->begin(), w->end());
            if (const auto* b = l->bias()) out.insert(out.end(), b->begin(), b->end());
        }
    }

    void set_parameters(const std::vector<T>& in) {
        if (in.size() != parameter_count()) throw ShapeMismatch("set_parameters: size mismatch");
        size_t pos = 0;
        for (auto& l : layers_) {
            if (auto* w = l->weights()) {
                std::copy_n(in.begin() + pos, w->size(), w->begin());
                pos += w->size();
            }
            if (auto* b = l->bias()) {
                std::copy_n(in.begin() + pos, b->size(), b->begin());
                pos += b->size();
            }
        }
    }

    /// Mutable views of every parameter block, aligned with Gradients slots.
    struct ParamBlock {
        T* values;
        const T* grads;
        size_t count;
    };
    std::vector<ParamBlock> parameter_blocks(const Gradients<T>& g) {
        std::vector<ParamBlock> blocks;
        for (size_t i = 0; i < layers_.size(); ++i) {
            if (auto* w = layers_[i]->weights()) blocks.push_back({w->data(), g.w[i].data(), w->size()});
            if (auto* b = layers_[i]->bias()) blocks.push_back({b->data(), g.b[i].data(), b->size()});
        }
        return blocks;
    }

private:
    NetworkSpec spec_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
    Shape3 out_shape_;
};

// ---------------------------------------------------------------------------
// Loss head
// ---------------------------------------------------------------------------

/// Softmax cross-entropy over logits rows. Returns the SUM of per-sample
/// losses (caller normalizes); when dlogits is non-null it receives
/// (softmax - onehot) * inv_total per sample. Predictions tie-break to the
/// lowest class index. Increments `correct` per matching prediction.
template <typename T>
T softmax_xent_sum(const Tensor<T>& logits, const std::uint8_t* labels, Tensor<T>* dlogits,
                   T inv_total, long& correct) {
    const int classes = logits.c;
    if (dlogits) dlogits->reshape(logits.n, classes, 1, 1);
    T loss_sum = T(0);
    for (int s = 0; s < logits.n; ++s) {
        const T* row = logits.sample(s);
        int label = labels[s];
        if (label >= classes) throw ShapeMismatch("label exceeds class count");
        T max_logit = row[0];
        int argmax = 0;
        for (int c = 1; c < classes; ++c) {
            if (row[c] > max_logit) {
                max_logit = row[c];
                argmax = c;
            }
        }
        if (argmax == label) ++correct;
        T denom = T(0);
        for (int c = 0; c < classes; ++c) denom += std::exp(row[c] - max_logit);
        loss_sum += std::log(denom) - (row[label] - max_logit);
        if (dlogits) {
            T* drow = dlogits->sample(s);
            for (int c = 0; c < classes; ++c) {
                T p = std::exp(row[c] - max_logit) / denom;
                drow[c] = (p - (c == label ? T(1) : T(0))) * inv_total;
            }
        }
    }
    return loss_sum;
}

// ---------------------------------------------------------------------------
// In-memory datasets
// ---------------------------------------------------------------------------

template <typename T>
struct DataView {
    int c = 1, h = 0, w = 0;
    std::vector<T> images;  // count * h * w * c
    std::vector<std::uint8_t> labels;

    int count() const { return static_cast<int>(labels.size()); }
    const T* image(int i) const {
        return images.data() + static_cast<size_t>(i) * c * h * w;
    }
};

/// Packed stimuli -> training tensors. Stored images are mean-pooled down to
/// target_size (the stored size must be a multiple) and mapped to ink=1,
/// background=0: x = (255 - v)/255.
template <typename T>
DataView<T> kanizsa_dataview(const PackedData& packed, int target_size) {
    if (packed.width != packed.height) throw ShapeMismatch("packed images must be square");
    if (target_size <= 0 || packed.width % target_size != 0) {
        throw ShapeMismatch("stored size " + std::to_string(packed.width) +
                            " is not a multiple of input size " + std::to_string(target_size));
    }
    const int f = packed.width / target_size;
    DataView<T> out;
    out.c = 1;
    out.h = out.w = target_size;
    out.labels = packed.labels;
    out.images.resize(packed.count() * static_cast<size_t>(target_size) * target_size);
    const T scale = T(1) / (T(255) * f * f);
    for (size_t i = 0; i < packed.count(); ++i) {
        const std::uint8_t* src = packed.image(i);
        T* dst = out.images.data() + i * static_cast<size_t>(target_size) * target_size;
        for (int y = 0; y < target_size; ++y) {
            for (int x = 0; x < target_size; ++x) {
                long acc = 0;
                for (int dy = 0; dy < f; ++dy) {
                    const std::uint8_t* row = src + static_cast<size_t>(y * f + dy) * packed.width;
                    for (int dx = 0; dx < f; ++dx) acc += row[x * f + dx];
                }
                dst[static_cast<size_t>(y) * target_size + x] =
                    (T(255) * f * f - static_cast<T>(acc)) * scale;
            }
        }
    }
    return out;
}

/// MNIST digits are bright-on-dark already: x = v/255.
template <typename T>
DataView<T> mnist_dataview(const LabeledImages& li) {
    DataView<T> out;
    out.c = 1;
    out.h = li.rows;
    out.w = li.cols;
    out.labels = li.labels;
    out.images.resize(li.images.size());
    for (size_t i = 0; i < li.images.size(); ++i) {
        out.images[i] = static_cast<T>(li.images[i]) / T(255);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    long correct = 0;
    int count = 0;

    double error_rate() const { return 1.0 - accuracy; }
};

namespace detail {

template <typename T>
void gather(const DataView<T>& data, const std::vector<int>& order, int begin, int end,
            Tensor<T>& out) {
    out.reshape(end - begin, data.c, data.h, data.w);
    size_t px = out.sample_size();
    for (int i = begin; i < end; ++i) {
        std::copy_n(data.image(order[static_cast<size_t>(i)]), px, out.sample(i - begin));
    }
}

}  // namespace detail

template <typename T>
EvalResult evaluate(const Network<T>& net, const DataView<T>& data, int batch_size = 64,
                    int threads = 1) {
    if (data.c != net.input_shape().c || data.h != net.input_shape().h ||
        data.w != net.input_shape().w) {
        throw ShapeMismatch("evaluate: dataset shape does not match network input");
    }
    const int n = data.count();
    threads = std::max(1, threads);
    std::vector<Workspace<T>> ws(threads);
    for (auto& w : ws) w = net.make_workspace();
    std::vector<double> loss_sums(threads, 0.0);
    std::vector<long> corrects(threads, 0);

    std::vector<int> identity(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) identity[static_cast<size_t>(i)] = i;

    parallel_chunks(n, threads, [&](int begin, int end, int t) {
        std::vector<std::uint8_t> labels;
        for (int b = begin; b < end; b += batch_size) {
            int e = std::min(b + batch_size, end);
            detail::gather(data, identity, b, e, ws[t].input);
            labels.assign(data.labels.begin() + b, data.labels.begin() + e);
            const Tensor<T>& logits = net.forward(ws[t].input, ws[t]);
            loss_sums[t] += static_cast<double>(softmax_xent_sum<T>(
                logits, labels.data(), nullptr, T(0), corrects[t]));
        }
    });

    EvalResult res;
    res.count = n;
    for (int t = 0; t < threads; ++t) {
        res.loss += loss_sums[t];
        res.correct += corrects[t];
    }
    if (!std::isfinite(res.loss)) throw NumericalDivergence("evaluation loss is not finite");
    res.loss /= std::max(1, n);
    res.accuracy = n > 0 ? static_cast<double>(res.correct) / n : 0.0;
    return res;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    double learning_rate = 0.01;  // fixed; no schedule
    int batch_size = 32;
    int max_epochs = 300;
    double target_val_accuracy = 0.95;
    std::uint64_t seed = 1;
    int eval_every = 1;
    // 0 keeps training to max_epochs after the target is reached (full
    // model-selection window); > 0 stops that many epochs past the target.
    int patience_after_target = 0;
    int threads = 1;
};

enum class TrainStatus { ReachedTarget, ExhaustedEpochs };

struct TrainOutcome {
    TrainStatus status = TrainStatus::ExhaustedEpochs;
    int epochs_to_target = -1;  // first epoch with val accuracy >= target
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    TrainOutcome outcome;
    std::vector<EpochRecord> records;
    int best_epoch = -1;       // checkpoint selection: lowest val loss after the
    double best_val_loss = 0;  // target epoch if reached, else lowest overall
};

inline void write_epoch_csv(const std::string& path, const std::vector<EpochRecord>& records,
                            bool zero_seconds = false) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "epoch,train_loss,train_acc,val_loss,val_acc,seconds\n";
    char buf[192];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.3f\n", r.epoch,
                      r.train_loss, r.train_acc, r.val_loss, r.val_acc,
                      zero_seconds ? 0.0 : r.seconds);
        f << buf;
    }
    if (!f) throw IoError("short write: " + path);
}

/// Epoch permutation is a pure function of (seed, epoch).
inline std::vector<int> epoch_permutation(std::uint64_t seed, int epoch, int n) {
    std::vector<int> perm(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
    SplitMix64 rng(derive_seed(seed, 3, static_cast<std::uint64_t>(epoch)));
    for (size_t i = perm.size(); i > 1; --i) {
        size_t j = rng.next_below(i);
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

/// SGD epoch loop with seeded shuffles. Throws NumericalDivergence when the
/// loss stops being finite (a failed trial). On return the network holds the
/// selected checkpoint: lowest validation loss after the target was first
/// reached, or lowest overall when it never was.
template <typename T>
TrainReport train(Network<T>& net, const DataView<T>& train_set, const DataView<T>& val_set,
                  const TrainConfig& cfg) {
    if (train_set.count() == 0 || val_set.count() == 0) {
        throw ShapeMismatch("train: empty dataset");
    }
    const int n = train_set.count();
    const int threads = std::max(1, cfg.threads);

    std::vector<Workspace<T>> ws(threads);
    for (auto& w : ws) w = net.make_workspace();
    std::vector<Gradients<T>> grads(threads);
    for (auto& g : grads) g = net.make_gradients();
    Gradients<T> total = net.make_gradients();

    TrainReport report;
    std::vector<T> best_params, best_after_target;
    double best_loss = 0.0, best_after_loss = 0.0;
    int best_epoch = -1, best_after_epoch = -1;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<int> perm = epoch_permutation(cfg.seed, epoch, n);

        double epoch_loss = 0.0;
        long epoch_correct = 0;
        for (int b = 0; b < n; b += cfg.batch_size) {
            const int e = std::min(b + cfg.batch_size, n);
            const int batch_n = e - b;
            const T inv_total = T(1) / static_cast<T>(batch_n);
            std::vector<double> losses(threads, 0.0);
            std::vector<long> corrects(threads, 0);
            std::exception_ptr err;
            std::mutex err_mutex;

            parallel_chunks(batch_n, threads, [&](int begin, int end, int t) {
                try {
                    detail::gather(train_set, perm, b + begin, b + end, ws[t].input);
                    std::vector<std::uint8_t> batch_labels(static_cast<size_t>(end - begin));
                    for (int i = begin; i < end; ++i) {
                        batch_labels[static_cast<size_t>(i - begin)] =
                            train_set.labels[static_cast<size_t>(perm[static_cast<size_t>(b + i)])];
                    }
                    const Tensor<T>& logits = net.forward(ws[t].input, ws[t]);
                    losses[t] = static_cast<double>(softmax_xent_sum<T>(
                        logits, batch_labels.data(), &ws[t].dlogits, inv_total, corrects[t]));
                    grads[t].zero();
                    net.backward(ws[t].input, ws[t].dlogits, ws[t], grads[t]);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!err) err = std::current_exception();
                }
            });
            if (err) std::rethrow_exception(err);

            total.zero();
            double batch_loss = 0.0;
            for (int t = 0; t < threads; ++t) {
                total.add(grads[t]);
                batch_loss += losses[t];
                epoch_correct += corrects[t];
            }
            if (!std::isfinite(batch_loss)) {
                throw NumericalDivergence("training loss became non-finite at epoch " +
                                          std::to_string(epoch));
            }
            epoch_loss += batch_loss;
            net.sgd_step(total, static_cast<T>(cfg.learning_rate));
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss / n;
        rec.train_acc = static_cast<double>(epoch_correct) / n;

        const bool eval_now = cfg.eval_every <= 1 || epoch % cfg.eval_every == 0 ||
                              epoch == cfg.max_epochs;
        if (eval_now) {
            EvalResult val = evaluate(net, val_set, std::max(cfg.batch_size, 64), threads);
            rec.val_loss = val.loss;
            rec.val_acc = val.accuracy;

            if (report.outcome.epochs_to_target < 0 &&
                val.accuracy >= cfg.target_val_accuracy) {
                report.outcome.status = TrainStatus::ReachedTarget;
                report.outcome.epochs_to_target = epoch;
            }
            std::vector<T> snapshot;
            if (best_epoch < 0 || val.loss < best_loss) {
                net.get_parameters(snapshot);
                best_params = snapshot;
                best_loss = val.loss;
                best_epoch = epoch;
            }
            if (report.outcome.epochs_to_target >= 0 &&
                (best_after_epoch < 0 || val.loss < best_after_loss)) {
                if (snapshot.empty()) net.get_parameters(snapshot);
                best_after_target = std::move(snapshot);
                best_after_loss = val.loss;
                best_after_epoch = epoch;
            }
        }
        rec.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.records.push_back(rec);

        if (cfg.patience_after_target > 0 && report.outcome.epochs_to_target >= 0 &&
            epoch >= report.outcome.epochs_to_target + cfg.patience_after_target) {
            break;
        }
    }

    if (report.outcome.epochs_to_target >= 0 && best_after_epoch >= 0) {
        net.set_parameters(best_after_target);
        report.best_epoch = best_after_epoch;
        report.best_val_loss = best_after_loss;
    } else if (best_epoch >= 0) {
        net.set_parameters(best_params);
        report.best_epoch = best_epoch;
        report.best_val_loss = best_loss;
    }
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: "KNZM" | u32 version | u32 descriptor length | descriptor |
// u64 parameter count | parameters as little-endian f32 in layer order.
// ---------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const std::string& path, const Network<T>& net) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write("KNZM", 4);
    auto put_u32 = [&](std::uint32_t v) {
        std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                             static_cast<std::uint8_t>(v >> 16),
                             static_cast<std::uint8_t>(v >> 24)};
        f.write(reinterpret_cast<const char*>(b), 4);
    };
    std::string desc = net.spec().describe();
    put_u32(1);
    put_u32(static_cast<std::uint32_t>(desc.size()));
    f.write(desc.data(), static_cast<std::streamsize>(desc.size()));
    std::vector<T> params;
    net.get_parameters(params);
    std::uint64_t count = params.size();
    std::uint8_t cb[8];
    for (int i = 0; i < 8; ++i) cb[i] = static_cast<std::uint8_t>(count >> (8 * i));
    f.write(reinterpret_cast<const char*>(cb), 8);
    for (T p : params) {
        float x = static_cast<float>(p);
        std::uint32_t bits;
        std::memcpy(&bits, &x, 4);
        std::uint8_t b[4] = {static_cast<std::uint8_t>(bits), static_cast<std::uint8_t>(bits >> 8),
                             static_cast<std::uint8_t>(bits >> 16),
                             static_cast<std::uint8_t>(bits >> 24)};
        f.write(reinterpret_cast<const char*>(b), 4);
    }
    if (!f) throw IoError("short write: " + path);
}

template <typename T>
Network<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, "KNZM", 4) != 0) {
        throw FormatError(path + ": bad checkpoint magic");
    }
    auto get_u32 = [&]() {
        std::uint8_t b[4];
        if (!f.read(reinterpret_cast<char*>(b), 4)) throw FormatError(path + ": truncated");
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    };
    if (get_u32() != 1) throw FormatError(path + ": unsupported checkpoint version");
    std::uint32_t desc_len = get_u32();
    std::string desc(desc_len, '\0');
    if (!f.read(desc.data(), desc_len)) throw FormatError(path + ": truncated descriptor");
    std::uint8_t cb[8];
    if (!f.read(reinterpret_cast<char*>(cb), 8)) throw FormatError(path + ": truncated");
    std::uint64_t count = 0;
    for (int i = 0; i < 8; ++i) count |= static_cast<std::uint64_t>(cb[i]) << (8 * i);

    Network<T> net(NetworkSpec::parse(desc));
    if (count != net.parameter_count()) {
        throw FormatError(path + ": parameter count does not match architecture");
    }
    std::vector<T> params(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint8_t b[4];
        if (!f.read(reinterpret_cast<char*>(b), 4)) throw FormatError(path + ": truncated params");
        std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                             (static_cast<std::uint32_t>(b[1]) << 8) |
                             (static_cast<std::uint32_t>(b[2]) << 16) |
                             (static_cast<std::uint32_t>(b[3]) << 24);
        float x;
        std::memcpy(&x, &bits, 4);
        params[i] = static_cast<T>(x);
    }
    net.set_parameters(params);
    return net;
}

}  // namespace kanizsa::nn
