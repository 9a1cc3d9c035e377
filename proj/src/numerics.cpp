#include "saeg/numerics.hpp"

#include <cmath>
#include <string>

#include "saeg/error.hpp"

namespace saeg {

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h) {
    if (!(h > 0.0)) {
        throw ConfigError("finite_diff_grad requires h > 0");
    }
    std::vector<double> probe(x.begin(), x.end());
    std::vector<double> grad(x.size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double base = probe[i];
        probe[i] = base + h;
        const double fp = f(probe);
        probe[i] = base - h;
        const double fm = f(probe);
        probe[i] = base;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("finite_diff_grad: non-finite objective at coordinate " +
                               std::to_string(i));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

} // namespace saeg
