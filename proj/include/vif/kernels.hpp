#pragma once

// Dense f64 inner loops. Every routine has a scalar reference and, on x86-64
// hosts with AVX2+FMA, a vectorized variant. The variant is picked once at
// startup; VIF_KERNELS=scalar|avx2 in the environment overrides the choice.

#include <cstddef>
#include <string_view>

namespace vif::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
    Isa isa;
    std::string_view name;

    // C[M,N] (+)= A[M,K] * B[K,N]
    void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                 const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
    // C[M,N] (+)= A[M,K] * B[N,K]^T
    void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
    // C[M,N] (+)= A[K,M]^T * B[K,N]
    void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                    const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
    double (*dot)(std::size_t n, const double* x, const double* y);
    // y += alpha * x
    void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
    // y = x * y (elementwise)
    void (*mul_inplace)(std::size_t n, const double* x, double* y);
};

const KernelTable& scalar_table();
// Null when the build or the host lacks AVX2+FMA.
const KernelTable* avx2_table();

bool host_supports(Isa isa);

// Table used by the tensor engine.
const KernelTable& active();
// Switches the active table; throws ContractError when the ISA is unavailable.
void select(Isa isa);

}  // namespace vif::kernels
