#include "vif/kernels.hpp"

#include <cstdlib>
#include <string>

#include "vif/error.hpp"

namespace vif::kernels {

#if defined(VIF_HAVE_AVX2)
namespace avx2 {
const KernelTable& table();
}
#endif

bool host_supports(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return true;
        case Isa::avx2:
#if defined(VIF_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
            return false;
#endif
    }
    return false;
}

const KernelTable* avx2_table() {
#if defined(VIF_HAVE_AVX2)
    if (host_supports(Isa::avx2)) return &avx2::table();
#endif
    return nullptr;
}

namespace {

const KernelTable* initial_table() {
    if (const char* env = std::getenv("VIF_KERNELS")) {
        const std::string want(env);
        if (want == "scalar") return &scalar_table();
        if (want == "avx2" && avx2_table()) return avx2_table();
    }
    if (const KernelTable* t = avx2_table()) return t;
    return &scalar_table();
}

const KernelTable*& current() {
    static const KernelTable* table = initial_table();
    return table;
}

}  // namespace

const KernelTable& active() { return *current(); }

void select(Isa isa) {
    if (isa == Isa::scalar) {
        current() = &scalar_table();
        return;
    }
    const KernelTable* t = avx2_table();
    if (t == nullptr) throw ContractError("kernels", "AVX2+FMA kernels are not available on this host");
    current() = t;
}

}  // namespace vif::kernels
