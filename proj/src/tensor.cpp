#include "tnseg/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "json.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace tnseg {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (shape_[i] == 0) throw ShapeError("tensor extent 0 on axis " + std::to_string(i));
    }
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("shape " + shape_str(shape_) + " does not hold " + std::to_string(data_.size()) +
                         " elements");
    }
}

Tensor Tensor::from(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(shape_.size()));
    }
    return shape_[axis];
}

double& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

namespace {

template <typename U>
void put_le(std::ostream& os, U bits) {
    char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    os.write(buf, sizeof(U));
}

template <typename U>
U get_le(const unsigned char* p) {
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
    return bits;
}

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
    return std::filesystem::path(stem.string() + ext);
}

}  // namespace

void save_tensor(const std::filesystem::path& stem, const Tensor& t, DType dtype) {
    nlohmann::json header;
    header["shape"] = t.shape();
    header["dtype"] = dtype == DType::f64 ? "f64" : "f32";
    {
        std::ofstream js(with_ext(stem, ".json"));
        if (!js) throw std::runtime_error("cannot write " + with_ext(stem, ".json").string());
        js << header.dump() << '\n';
    }
    std::ofstream bin(with_ext(stem, ".bin"), std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + with_ext(stem, ".bin").string());
    for (double v : t.data()) {
        if (dtype == DType::f64) {
            put_le(bin, std::bit_cast<std::uint64_t>(v));
        } else {
            put_le(bin, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
    }
    if (!bin) throw std::runtime_error("short write to " + with_ext(stem, ".bin").string());
}

Tensor load_tensor(const std::filesystem::path& stem) {
    std::ifstream js(with_ext(stem, ".json"));
    if (!js) throw std::runtime_error("cannot read " + with_ext(stem, ".json").string());
    nlohmann::json header;
    js >> header;
    Shape shape = header.at("shape").get<Shape>();
    const std::string dtype = header.value("dtype", "f64");
    if (dtype != "f64" && dtype != "f32") throw std::runtime_error("unknown dtype " + dtype);
    const std::size_t width = dtype == "f64" ? 8 : 4;

    std::ifstream bin(with_ext(stem, ".bin"), std::ios::binary);
    if (!bin) throw std::runtime_error("cannot read " + with_ext(stem, ".bin").string());
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    const std::size_t n = shape_numel(shape);
    if (raw.size() != n * width) {
        throw std::runtime_error(with_ext(stem, ".bin").string() + ": payload size " + std::to_string(raw.size()) +
                                 " does not match shape " + shape_str(shape));
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* p = raw.data() + i * width;
        data[i] = width == 8 ? std::bit_cast<double>(get_le<std::uint64_t>(p))
                             : static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(p)));
    }
    return Tensor(std::move(shape), std::move(data));
}

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace tnseg
