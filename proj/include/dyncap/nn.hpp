#pragma once

// Small reusable layers on top of the tensor ops.

#include <cmath>
#include <string>
#include <vector>

#include "dyncap/params.hpp"
#include "dyncap/rng.hpp"
#include "dyncap/tensor.hpp"

namespace dyncap {

enum class Mode { Train, Eval };

// uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))
template <class T>
TensorT<T> init_projection(const Shape& shape, int fan_in, RngState& rng) {
    const T bound = static_cast<T>(std::sqrt(1.0 / static_cast<double>(fan_in)));
    auto t = TensorT<T>::uniform(shape, rng, -bound, bound);
    t.set_requires_grad(true);
    return t;
}

template <class T>
TensorT<T> init_zeros(const Shape& shape) {
    auto t = TensorT<T>::zeros(shape);
    t.set_requires_grad(true);
    return t;
}

template <class T>
struct Linear {
    TensorT<T> w, b;
    bool has_bias = false;

    Linear() = default;
    Linear(int in, int out, bool bias, RngState& rng)
        : w(init_projection<T>({in, out}, in, rng)), has_bias(bias) {
        if (bias) b = init_zeros<T>({out});
    }

    TensorT<T> forward(const TensorT<T>& x) const {
        auto y = matmul(x, w);
        return has_bias ? add(y, b) : y;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".w", w});
        if (has_bias) out.push_back({prefix + ".b", b});
    }
};

template <class T>
struct BatchNorm {
    TensorT<T> gamma, beta;
    std::vector<T> running_mean, running_var;
    T momentum = static_cast<T>(0.1);
    T eps = static_cast<T>(1e-5);

    BatchNorm() = default;
    explicit BatchNorm(int c)
        : gamma(init_zeros<T>({c})), beta(init_zeros<T>({c})),
          running_mean(static_cast<std::size_t>(c), T(0)),
          running_var(static_cast<std::size_t>(c), T(1)) {
        std::fill(gamma.mutable_data().begin(), gamma.mutable_data().end(), T(1));
    }

    TensorT<T> forward(const TensorT<T>& x, Mode mode) {
        return batch_norm(x, gamma, beta, running_mean, running_var, momentum, eps,
                          mode == Mode::Train);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }

    void collect_buffers(const std::string& prefix, BufferList<T>& out) {
        out.push_back({prefix + ".running_mean", &running_mean});
        out.push_back({prefix + ".running_var", &running_var});
    }
};

template <class T>
struct LayerNorm {
    TensorT<T> gamma, beta;
    T eps = static_cast<T>(1e-5);

    LayerNorm() = default;
    explicit LayerNorm(int d) : gamma(init_zeros<T>({d})), beta(init_zeros<T>({d})) {
        std::fill(gamma.mutable_data().begin(), gamma.mutable_data().end(), T(1));
    }

    TensorT<T> forward(const TensorT<T>& x) const { return layer_norm(x, gamma, beta, eps); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

template <class T>
struct Embedding {
    TensorT<T> table;

    Embedding() = default;
    Embedding(int vocab, int dim, RngState& rng)
        : table(init_projection<T>({vocab, dim}, dim, rng)) {}

    TensorT<T> forward(const std::vector<int>& ids, const Shape& ids_shape) const {
        return embed(table, ids, ids_shape);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".table", table});
    }
};

}  // namespace dyncap
