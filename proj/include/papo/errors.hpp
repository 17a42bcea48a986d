#pragma once

#include <stdexcept>
#include <string>

namespace papo {

// Base for every error raised by the library. The kind() string is stable and
// is what the CLI prints next to the message.
class Error : public std::runtime_error {
 public:
  Error(const char* kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  const char* kind() const noexcept { return kind_; }

 private:
  const char* kind_;
};

#define PAPO_DEFINE_ERROR(Name, kind_str)                               \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(kind_str, what) {}   \
  };

PAPO_DEFINE_ERROR(DomainError, "domain")
PAPO_DEFINE_ERROR(ShapeError, "shape")
PAPO_DEFINE_ERROR(InvalidGroupError, "invalid-group")
PAPO_DEFINE_ERROR(ConstraintError, "constraint")
PAPO_DEFINE_ERROR(ValidationError, "validation")
PAPO_DEFINE_ERROR(NumericError, "numeric")
PAPO_DEFINE_ERROR(UnsupportedError, "unsupported")
PAPO_DEFINE_ERROR(SchemaError, "schema")
PAPO_DEFINE_ERROR(LoadError, "load")
PAPO_DEFINE_ERROR(NotFoundError, "not-found")
PAPO_DEFINE_ERROR(IoError, "io")

#undef PAPO_DEFINE_ERROR

}  // namespace papo
