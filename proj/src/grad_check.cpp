#include "donet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "donet/rng.hpp"

namespace donet {

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (pass ? "pass" : "FAIL") << " max_rel_err=" << max_rel_err << " (coord " << worst_index << ", "
       << checked << " checked";
    if (!kinks.empty()) os << ", " << kinks.size() << " kink coords excluded";
    os << ")";
    if (non_finite_index) os << " non-finite evaluation at coord " << *non_finite_index;
    return os.str();
}

namespace {

std::vector<std::size_t> pick_coordinates(std::size_t total, const GradCheckOptions& opt) {
    std::vector<std::size_t> idx(total);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_coordinates == 0 || opt.max_coordinates >= total) return idx;
    CounterRng rng(derive_key(opt.seed, 0x67726164));
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < opt.max_coordinates; ++i) {
        const std::size_t j = i + rng.below(total - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(opt.max_coordinates);
    std::sort(idx.begin(), idx.end());
    return idx;
}

GradCheckReport run_check(const std::function<Tensord()>& fn, Tensord& target, const GradCheckOptions& opt) {
    GradCheckReport report;
    target.zero_grad();
    const Tensord loss = fn();
    if (loss.shape() != scalar_shape) throw ContractError("grad_check: function must return a scalar");
    if (!loss.requires_grad()) throw ContractError("grad_check: output does not depend on the checked tensor");
    loss.backward();
    const std::vector<double> analytic = target.has_grad() ? std::vector<double>(target.grad().begin(), target.grad().end())
                                                           : std::vector<double>(target.numel(), 0.0);
    const double f0 = loss.item();
    target.zero_grad();

    NoGradGuard guard;
    auto data = target.data();
    const double h = opt.step;
    for (std::size_t i : pick_coordinates(data.size(), opt)) {
        const double orig = data[i];
        data[i] = orig + h;
        const double fp = fn().item();
        data[i] = orig - h;
        const double fm = fn().item();
        data[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            report.non_finite_index = i;
            report.pass = false;
            return report;
        }
        ++report.checked;
        const double numeric = (fp - fm) / (2.0 * h);
        const double fwd = (fp - f0) / h;
        const double bwd = (f0 - fm) / h;
        const double spread = std::abs(fwd - bwd);
        if (spread > 1e-6 && spread > 0.5 * std::max(std::abs(fwd), std::abs(bwd))) {
            report.kinks.push_back(i);
            continue;
        }
        const double ga = analytic[i];
        const double rel = std::abs(ga - numeric) / std::max({std::abs(ga), std::abs(numeric), 1e-8});
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_err <= opt.tolerance;
    return report;
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& fn, Tensord input, const GradCheckOptions& options) {
    if (!input.is_leaf()) input = input.detach();
    const bool previous = input.requires_grad();
    input.set_requires_grad(true);
    auto report = run_check([&] { return fn(input); }, input, options);
    input.set_requires_grad(previous);
    return report;
}

GradCheckReport grad_check_param(const std::function<Tensord()>& fn, Tensord param, const GradCheckOptions& options) {
    if (!param.is_leaf() || !param.requires_grad()) {
        throw ContractError("grad_check_param: parameter must be a leaf that requires grad");
    }
    return run_check(fn, param, options);
}

}  // namespace donet
