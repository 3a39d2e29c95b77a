#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace spx {

// Root of every error raised by the library. The subclasses name the failure
// category; messages carry the offending path, shape or index.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;

  // Pipeline stage that raised the error ("imaging", "slic", ...); empty
  // until a caller tags it.
  const std::string& module() const { return module_; }
  void set_module(std::string module) { module_ = std::move(module); }

 private:
  std::string module_;
};

#define SPX_DEFINE_ERROR(Name)          \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  };

SPX_DEFINE_ERROR(FormatError)
SPX_DEFINE_ERROR(IoError)
SPX_DEFINE_ERROR(ConsistencyError)
SPX_DEFINE_ERROR(StratificationError)
SPX_DEFINE_ERROR(ConfigError)
SPX_DEFINE_ERROR(ShapeError)
SPX_DEFINE_ERROR(IndexError)
SPX_DEFINE_ERROR(ContractError)
SPX_DEFINE_ERROR(DegenerateBatchError)
SPX_DEFINE_ERROR(EmptyGraphError)
SPX_DEFINE_ERROR(CorruptFileError)
SPX_DEFINE_ERROR(DivergenceError)
SPX_DEFINE_ERROR(CheckpointError)

#undef SPX_DEFINE_ERROR

}  // namespace spx
