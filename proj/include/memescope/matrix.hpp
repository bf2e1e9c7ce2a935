#ifndef MEMESCOPE_MATRIX_HPP_
#define MEMESCOPE_MATRIX_HPP_

#include "memescope/core.hpp"

#include <bit>
#include <cstring>
#include <span>

namespace memescope {

// Dense row-major matrix. Rows are observations throughout the library, so
// row(i) of an embedding matrix is the feature vector of manifest record i.
template <typename T>
class Matrix {
  public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> values)
        : rows_(rows), cols_(cols), values_(std::move(values))
    {
        if (values_.size() != rows_ * cols_)
            throw InputError("Matrix: value count " + std::to_string(values_.size()) +
                             " != rows*cols " + std::to_string(rows_ * cols_));
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return values_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

    std::span<T> values() { return values_; }
    std::span<const T> values() const { return values_; }

    bool all_finite() const
    {
        return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Matrix<U> cast() const
    {
        std::vector<U> out(values_.size());
        std::transform(values_.begin(), values_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Matrix<U>(rows_, cols_, std::move(out));
    }

    Matrix select_rows(std::span<const std::size_t> idx) const
    {
        Matrix out(idx.size(), cols_);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto src = row(idx[i]);
            std::copy(src.begin(), src.end(), out.row(i).begin());
        }
        return out;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> values_;
};

using MatrixD = Matrix<double>;
using MatrixF = Matrix<float>;

template <typename T>
T squared_distance(std::span<const T> a, std::span<const T> b)
{
    T s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b)
{
    T s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::string& out, T value)
{
    static_assert(std::is_trivially_copyable_v<T>);
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.append(bytes, sizeof(T));
}

template <typename T>
T get_le(std::string_view in, std::size_t& pos)
{
    if (pos + sizeof(T) > in.size()) throw InputError("unexpected end of binary data");
    char bytes[sizeof(T)];
    std::memcpy(bytes, in.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos += sizeof(T);
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace detail

// EMB1: "EMB1", u32 rows, u32 cols, rows*cols f32, all little-endian, row-major.
inline std::string encode_emb1(const MatrixD& m)
{
    std::string out = "EMB1";
    out.reserve(12 + 4 * m.values().size());
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    for (double v : m.values()) detail::put_le<float>(out, static_cast<float>(v));
    return out;
}

inline MatrixD decode_emb1(std::string_view bytes)
{
    if (bytes.substr(0, 4) != "EMB1") throw InputError("EMB1: bad magic");
    std::size_t pos = 4;
    const auto rows = detail::get_le<std::uint32_t>(bytes, pos);
    const auto cols = detail::get_le<std::uint32_t>(bytes, pos);
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    if (bytes.size() != 12 + 4 * n)
        throw InputError("EMB1: size " + std::to_string(bytes.size()) + " does not match header " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    std::vector<double> values(n);
    for (auto& v : values) v = detail::get_le<float>(bytes, pos);
    return MatrixD(rows, cols, std::move(values));
}

inline void write_emb1(const std::filesystem::path& path, const MatrixD& m)
{
    write_file_atomic(path, encode_emb1(m));
}

inline MatrixD read_emb1(const std::filesystem::path& path) { return decode_emb1(read_file(path)); }

}  // namespace memescope

#endif
