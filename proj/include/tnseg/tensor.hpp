#pragma once

#include <cstddef>
#include <filesystem>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tnseg {

using Shape = std::vector<std::size_t>;

/// Cache-line aligned storage. Vectorized kernels peel differently depending on where a buffer
/// starts, so a fixed alignment keeps results independent of the heap layout.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/// Raised when operand shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for log/div domain violations when checked math is on.
class DomainError : public std::domain_error {
   public:
    using std::domain_error::domain_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Layout for images and activations is [N,C,H,W].
class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor(Shape{1}, v); }
    static Tensor from(std::initializer_list<double> values);
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double* ptr() { return data_.data(); }
    const double* ptr() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

    /// Same data, new shape with equal element count.
    Tensor reshaped(Shape shape) const;
    void fill(double v);
    double item() const;

    bool all_finite() const;

   private:
    Shape shape_;
    Buffer data_;
};

enum class DType { f64, f32 };

/// Writes `<stem>.bin` (little-endian payload) and `<stem>.json` (`{"shape": [...], "dtype": ...}`).
void save_tensor(const std::filesystem::path& stem, const Tensor& t, DType dtype = DType::f64);
Tensor load_tensor(const std::filesystem::path& stem);

/// Keeps freed activation buffers in the heap instead of returning them to the OS, so large
/// per-step allocations do not page-fault every iteration. No-op outside glibc.
void tune_allocator();

}  // namespace tnseg
