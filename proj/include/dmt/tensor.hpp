#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "dmt/errors.hpp"

namespace dmt {

/// Dense row-major float32 array of rank 1-4. Treated as an immutable value
/// after construction; concurrent readers are safe.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, float value);
    static Tensor from_data(std::vector<int> shape, std::vector<float> data);

    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float operator()(int i) const { return data_[static_cast<std::size_t>(i)]; }
    float& operator()(int i) { return data_[static_cast<std::size_t>(i)]; }
    float operator()(int i, int j) const { return data_[idx2(i, j)]; }
    float& operator()(int i, int j) { return data_[idx2(i, j)]; }
    float operator()(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
    float& operator()(int i, int j, int k) { return data_[idx3(i, j, k)]; }
    float operator()(int i, int j, int k, int l) const { return data_[idx4(i, j, k, l)]; }
    float& operator()(int i, int j, int k, int l) { return data_[idx4(i, j, k, l)]; }

    std::span<const float> data() const { return data_; }
    std::span<float> data() { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    float min_value() const;
    float max_value() const;

private:
    std::size_t idx2(int i, int j) const {
        return static_cast<std::size_t>(i) * stride_[0] + static_cast<std::size_t>(j);
    }
    std::size_t idx3(int i, int j, int k) const {
        return static_cast<std::size_t>(i) * stride_[0] + static_cast<std::size_t>(j) * stride_[1] +
               static_cast<std::size_t>(k);
    }
    std::size_t idx4(int i, int j, int k, int l) const {
        return static_cast<std::size_t>(i) * stride_[0] + static_cast<std::size_t>(j) * stride_[1] +
               static_cast<std::size_t>(k) * stride_[2] + static_cast<std::size_t>(l);
    }
    void init_strides();

    std::vector<int> shape_;
    std::vector<float> data_;
    std::size_t stride_[3] = {0, 0, 0};  // strides of all but the last axis
};

/// Resize a C x H x W map with half-pixel-center sampling: the source
/// coordinate of output pixel d is (d + 0.5) * in/out - 0.5, clamped to the
/// valid range. Every output value is a convex combination of the four
/// nearest source values.
Tensor bilinear_resize(const Tensor& src, int out_h, int out_w);

/// Rank-2 H x W convenience overload of the same sampling.
Tensor bilinear_resize_2d(const Tensor& src, int out_h, int out_w);

/// The two source indices and interpolation fraction used for output
/// position d along one axis; shared by the resize and its transpose.
struct BilinearSample {
    int lo;
    int hi;
    float frac;
};
BilinearSample bilinear_sample_axis(int d, int in, int out);

/// Cosine similarity in [-1, 1]; returns 0 when either norm is below 1e-8.
float cosine_sim(std::span<const float> u, std::span<const float> v);

/// Two-way softmax applied per position: exp(a)/(exp(a)+exp(b)) and its
/// complement. Outputs sum to 1 everywhere.
std::pair<Tensor, Tensor> softmax_pair(const Tensor& a, const Tensor& b);

/// Ridge-stabilised left pseudo-inverse of a two-column matrix:
/// (C^T C + ridge I2)^-1 C^T. Throws SingularPrototypeMatrix when
/// det(C^T C + ridge I2) < 1e-12.
Tensor pinv2(const Tensor& c, float ridge);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2(const Tensor& a);

/// Smallest singular value of a C x 2 matrix via the closed-form
/// eigenvalues of the 2x2 Gram matrix.
float min_singular_value_2col(const Tensor& c);

float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace dmt
