#pragma once

/// @file common.hpp
/// Shared value types for the adaptation toolkit: dense pixel grids, error
/// types and a stable content hash.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace iapc {

/// Label value excluded from losses and metrics.
inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Largest class count representable in an 8-bit index map next to kIgnoreLabel.
inline constexpr int kMaxClasses = 255;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParameterError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct LoadError : Error {
    using Error::Error;
};
struct ValidationError : Error {
    using Error::Error;
};
struct PreconditionError : Error {
    using Error::Error;
};

/// Heap buffer aligned to Eigen's widest packet. Eigen decides how many
/// leading scalars of a reduction to handle outside the vector loop from the
/// buffer address, so with plain std::vector storage float sums would depend
/// on where the allocator happened to put the data.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// H x W x C array stored pixel-major (channels of one pixel are contiguous).
///
/// The memory layout coincides with a column-major C x (H*W) matrix, which is
/// how the network layers view it.
template <typename T>
class Tensor3 {
public:
    using value_type = T;

    Tensor3() = default;
    Tensor3(int height, int width, int channels, T fill = T{})
        : height_(height), width_(width), channels_(channels) {
        if (height < 0 || width < 0 || channels < 0) {
            throw ParameterError("Tensor3: negative dimension");
        }
        data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    int pixels() const noexcept { return height_ * width_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(int y, int x, int c) noexcept { return data_[index(y, x, c)]; }
    const T& operator()(int y, int x, int c) const noexcept { return data_[index(y, x, c)]; }

    std::span<T> pixel(int y, int x) noexcept {
        return {data_.data() + index(y, x, 0), static_cast<std::size_t>(channels_)};
    }
    std::span<const T> pixel(int y, int x) const noexcept {
        return {data_.data() + index(y, x, 0), static_cast<std::size_t>(channels_)};
    }
    /// Pixel by flat index p = y * width + x.
    std::span<T> pixel(int p) noexcept {
        return {data_.data() + static_cast<std::size_t>(p) * channels_, static_cast<std::size_t>(channels_)};
    }
    std::span<const T> pixel(int p) const noexcept {
        return {data_.data() + static_cast<std::size_t>(p) * channels_, static_cast<std::size_t>(channels_)};
    }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }

    template <typename U>
    bool same_shape(const Tensor3<U>& other) const noexcept {
        return height_ == other.height() && width_ == other.width() && channels_ == other.channels();
    }
    template <typename U>
    bool same_grid(const Tensor3<U>& other) const noexcept {
        return height_ == other.height() && width_ == other.width();
    }

    bool operator==(const Tensor3&) const = default;

private:
    std::size_t index(int y, int x, int c) const noexcept {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    AlignedVector<T> data_;
};

/// H x W single-channel grid.
template <typename T>
class Grid2 {
public:
    using value_type = T;

    Grid2() = default;
    Grid2(int height, int width, T fill = T{}) : height_(height), width_(width) {
        if (height < 0 || width < 0) {
            throw ParameterError("Grid2: negative dimension");
        }
        data_.assign(static_cast<std::size_t>(height) * width, fill);
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int pixels() const noexcept { return height_ * width_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(int y, int x) noexcept { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    const T& operator()(int y, int x) const noexcept { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    T& operator[](int p) noexcept { return data_[static_cast<std::size_t>(p)]; }
    const T& operator[](int p) const noexcept { return data_[static_cast<std::size_t>(p)]; }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }

    template <typename U>
    bool same_grid(const Grid2<U>& other) const noexcept {
        return height_ == other.height() && width_ == other.width();
    }
    template <typename U>
    bool same_grid(const Tensor3<U>& other) const noexcept {
        return height_ == other.height() && width_ == other.width();
    }

    bool operator==(const Grid2&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    AlignedVector<T> data_;
};

/// RGB image, values in [0,1].
using Image = Tensor3<float>;
/// Per-pixel class index in {0..C-1} or kIgnoreLabel.
using LabelMap = Grid2<std::uint8_t>;
/// Nonzero marks a pixel excluded from a loss.
using PixelMask = Grid2<std::uint8_t>;

/// 64-bit FNV-1a. Stable across platforms; used for artifact and parameter hashes.
class Fnv1a {
public:
    void update(const void* bytes, std::size_t n) noexcept {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) noexcept { update(s.data(), s.size()); }
    template <typename T>
    void update_values(std::span<const T> v) noexcept {
        update(v.data(), v.size_bytes());
    }
    std::uint64_t digest() const noexcept { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

}  // namespace iapc
