#pragma once

#include <stdexcept>
#include <string>

namespace vif {

// Exit-code class an error maps to at the process boundary.
enum class ErrorClass { usage = 1, validation = 2, numeric = 3 };

// Every error names the module that raised it and the invariant that failed.
class Error : public std::runtime_error {
public:
    Error(ErrorClass cls, std::string module, std::string kind, const std::string& what)
        : std::runtime_error(module + ": " + kind + ": " + what),
          cls_(cls), module_(std::move(module)), kind_(std::move(kind)) {}

    ErrorClass error_class() const noexcept { return cls_; }
    const std::string& module() const noexcept { return module_; }
    const std::string& kind() const noexcept { return kind_; }

private:
    ErrorClass cls_;
    std::string module_;
    std::string kind_;
};

#define VIF_DEFINE_ERROR(Name, cls, kind_name)                                   \
    class Name : public Error {                                                  \
    public:                                                                      \
        Name(std::string module, const std::string& what)                        \
            : Error(ErrorClass::cls, std::move(module), kind_name, what) {}      \
    };

VIF_DEFINE_ERROR(DimensionError, validation, "dimension error")
VIF_DEFINE_ERROR(DomainError, numeric, "domain error")
VIF_DEFINE_ERROR(ContractError, validation, "contract error")
VIF_DEFINE_ERROR(NumericError, numeric, "numeric error")
VIF_DEFINE_ERROR(InvariantError, validation, "invariant error")
VIF_DEFINE_ERROR(LayoutError, validation, "layout error")
VIF_DEFINE_ERROR(VocabError, validation, "vocab error")
VIF_DEFINE_ERROR(FormatError, validation, "format error")
VIF_DEFINE_ERROR(ConfigError, validation, "config error")
VIF_DEFINE_ERROR(PlanError, validation, "plan error")
VIF_DEFINE_ERROR(GenerationError, validation, "generation error")
VIF_DEFINE_ERROR(UsageError, usage, "usage error")

#undef VIF_DEFINE_ERROR

}  // namespace vif
