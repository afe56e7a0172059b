#include "kernels_internal.hpp"

#include <atomic>
#include <cstdlib>
#include <string_view>

namespace dreg::kernels {
namespace {

bool cpu_supports_avx2() noexcept {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const KernelTable* pick_default() noexcept {
    const KernelTable* wide = avx2_table();
    if (const char* env = std::getenv("DREG_KERNELS")) {
        if (std::string_view(env) == "scalar") return &scalar_table();
        if (std::string_view(env) == "avx2" && wide) return wide;
    }
    return wide ? wide : &scalar_table();
}

std::atomic<const KernelTable*>& slot() noexcept {
    static std::atomic<const KernelTable*> table{pick_default()};
    return table;
}

} // namespace

const KernelTable* avx2_table() noexcept {
#ifdef DREG_HAVE_AVX2
    static const bool ok = cpu_supports_avx2();
    return ok ? detail::avx2_table_impl() : nullptr;
#else
    return nullptr;
#endif
}

const KernelTable& active() noexcept { return *slot().load(std::memory_order_relaxed); }

bool select(Isa isa) noexcept {
    const KernelTable* t = isa == Isa::scalar ? &scalar_table() : avx2_table();
    if (!t) return false;
    slot().store(t, std::memory_order_relaxed);
    return true;
}

std::string_view isa_name(Isa isa) noexcept { return isa == Isa::scalar ? "scalar" : "avx2"; }

} // namespace dreg::kernels
