#include "doctest.h"

#include "dreg/gradcheck.hpp"

#include <set>
#include <stdexcept>

using namespace dreg;

TEST_CASE("gradcheck suite covers the required cases with unique names") {
    const auto names = gradcheck_case_names();
    const std::set<std::string> unique(names.begin(), names.end());
    CHECK(unique.size() == names.size());
    for (const char* required : {"conv3d_stride1", "conv_transpose3d", "instance_norm", "softmax", "grid_sample",
                                 "integrate_velocity", "dfi", "nff", "full_network", "nlcc_loss", "affine_loss"}) {
        CHECK_MESSAGE(unique.count(required) == 1, required);
    }
}

TEST_CASE("gradcheck passes on a default seed and reports every case") {
    const GradCheckReport r = run_gradcheck(1);
    CHECK(r.entries.size() == gradcheck_case_names().size());
    for (const auto& e : r.entries) CHECK_MESSAGE(e.passed(), e.name << " " << e.max_rel_error);
    CHECK(r.passed());
    const std::string text = r.to_text();
    CHECK(text.find("full_network") != std::string::npos);
    CHECK(text.find("all passed") != std::string::npos);
}

TEST_CASE("an injected broken backward fails exactly that case") {
    const GradCheckReport r = run_gradcheck(2, "softmax");
    CHECK_FALSE(r.passed());
    for (const auto& e : r.entries) CHECK_MESSAGE(e.passed() == (e.name != "softmax"), e.name);
    CHECK_THROWS_AS(run_gradcheck(2, "no_such_op"), std::invalid_argument);
}
