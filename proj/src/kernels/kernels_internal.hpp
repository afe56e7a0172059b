#pragma once

#include "dreg/kernels.hpp"

namespace dreg::kernels::detail {

const KernelTable* avx2_table_impl() noexcept;

} // namespace dreg::kernels::detail
