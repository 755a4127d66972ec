#ifndef CHAMTOY_COMMON_HPP_
#define CHAMTOY_COMMON_HPP_

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace chamtoy {

#ifdef CHAMTOY_FLOAT32
using Scalar = float;
inline constexpr const char* kScalarDtype = "f32";
#else
using Scalar = double;
inline constexpr const char* kScalarDtype = "f64";
#endif

using TokenId = std::uint32_t;
using TokenIds = std::vector<TokenId>;
using Shape = std::vector<std::size_t>;

// Error hierarchy. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct DivergenceError : Error {
  using Error::Error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

}  // namespace chamtoy

#endif  // CHAMTOY_COMMON_HPP_
