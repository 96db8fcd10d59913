#pragma once

#include <string>
#include <vector>

#include "dyncap/tensor.hpp"

namespace dyncap {

// Trainable tensor with a unique path-style name ("enc.0.gmc.wq").
// Collection order is construction order, which is deterministic.
template <class T>
struct NamedParam {
    std::string name;
    TensorT<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

// Non-trainable state that still belongs in a checkpoint (BN running stats).
template <class T>
struct NamedBuffer {
    std::string name;
    std::vector<T>* data;
};

template <class T>
using BufferList = std::vector<NamedBuffer<T>>;

}  // namespace dyncap
