#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <string>
#include <vector>

#include "dcgrid/errors.hpp"

namespace dcgrid {

enum class Method { Rk4, Rk45 };

struct IntegratorConfig {
    Method method = Method::Rk4;
    double dt = 1e-5;            // fixed step, or initial/maximum step for Rk45
    double t_end = 10.0;
    double sample_period = 1e-2;
    double rtol = 1e-8;          // Rk45 only
    double atol = 1e-10;         // Rk45 only
    double dt_min = 1e-14;       // Rk45 step underflow threshold
};

template <class S>
concept OdeSystem = requires(S& s, double t, const Eigen::VectorXd& y, Eigen::VectorXd& dy) {
    { s(t, y, dy) };
};

/// Systems may adjust the state after every accepted step (e.g. to put a
/// coordinate that crossed a kink back onto it).
template <class S>
concept HasPostStep = requires(S& s, const Eigen::VectorXd& prev, Eigen::VectorXd& y) {
    { s.post_step(prev, y) };
};

enum class SamplePhase { Regular, BeforeEvent, AfterEvent };

using EventHandler = std::function<void(std::size_t index, double t, Eigen::VectorXd& y)>;
using Observer = std::function<void(double t, const Eigen::VectorXd& y, SamplePhase phase)>;

struct IntegrationStats {
    long steps = 0;
    long rejected = 0;
};

namespace detail {

struct Breakpoint {
    double t;
    bool sample;
    std::vector<std::size_t> events;
};

// Sample instants k * period, event instants and t_end, merged and sorted.
// Times closer than a relative 1e-12 are the same breakpoint.
inline std::vector<Breakpoint> breakpoints(const IntegratorConfig& cfg, const std::vector<double>& events) {
    std::vector<Breakpoint> bps;
    const double scale = std::max(1.0, cfg.t_end);
    const double merge = 1e-12 * scale;
    if (cfg.sample_period > 0) {
        const long count = static_cast<long>(std::floor(cfg.t_end / cfg.sample_period + 1e-9));
        for (long k = 1; k <= count; ++k) bps.push_back({static_cast<double>(k) * cfg.sample_period, true, {}});
    }
    bps.push_back({cfg.t_end, true, {}});
    for (std::size_t e = 0; e < events.size(); ++e)
        if (events[e] > 0 && events[e] < cfg.t_end - merge) bps.push_back({events[e], false, {e}});
    std::sort(bps.begin(), bps.end(), [](const auto& a, const auto& b) { return a.t < b.t; });

    std::vector<Breakpoint> merged;
    for (auto& bp : bps) {
        if (!merged.empty() && bp.t - merged.back().t <= merge) {
            merged.back().sample = merged.back().sample || bp.sample;
            merged.back().events.insert(merged.back().events.end(), bp.events.begin(), bp.events.end());
        } else {
            merged.push_back(std::move(bp));
        }
    }
    return merged;
}

inline void require_finite(const Eigen::VectorXd& y, const Eigen::VectorXd& last_good, double t_good) {
    if (!y.allFinite())
        throw IntegrationError("state became non-finite after t = " + std::to_string(t_good), t_good,
                               std::vector<double>(last_good.data(), last_good.data() + last_good.size()));
}

template <OdeSystem S>
void rk4_step(S& sys, double t, double h, Eigen::VectorXd& y, Eigen::VectorXd* k, Eigen::VectorXd& tmp) {
    sys(t, y, k[0]);
    tmp = y + 0.5 * h * k[0];
    sys(t + 0.5 * h, tmp, k[1]);
    tmp = y + 0.5 * h * k[1];
    sys(t + 0.5 * h, tmp, k[2]);
    tmp = y + h * k[2];
    sys(t + h, tmp, k[3]);
    y += (h / 6.0) * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3]);
}

} // namespace detail

/// Integrates y' = sys(t, y) from t = 0 to cfg.t_end.
///
/// Step boundaries always land on sample and event instants, so samples are
/// taken from the integrator state itself and never interpolated. At an
/// event instant the observer sees the state once before and once after the
/// handler runs; the state is continuous across the event.
template <OdeSystem S>
Eigen::VectorXd integrate(S& sys, Eigen::VectorXd y, const IntegratorConfig& cfg,
                          const std::vector<double>& event_times = {}, const EventHandler& on_event = {},
                          const Observer& observer = {}, IntegrationStats* stats = nullptr) {
    if (!(cfg.dt > 0)) throw std::invalid_argument("integrate: step size must be positive");
    if (!(cfg.t_end >= 0)) throw std::invalid_argument("integrate: negative horizon");
    for (std::size_t e = 1; e < event_times.size(); ++e)
        if (!(event_times[e] > event_times[e - 1]))
            throw std::invalid_argument("integrate: event times must be strictly increasing");
    if (!y.allFinite()) throw IntegrationError("initial state is not finite", 0.0);

    IntegrationStats local;
    IntegrationStats& st = stats ? *stats : local;
    if (observer) observer(0.0, y, SamplePhase::Regular);
    if (cfg.t_end == 0.0) return y;

    const auto bps = detail::breakpoints(cfg, event_times);
    const int dim = static_cast<int>(y.size());
    Eigen::VectorXd k[7];
    for (auto& v : k) v.resize(dim);
    Eigen::VectorXd tmp(dim), prev(dim), y5(dim), err(dim);

    double t = 0.0;
    double h_adapt = cfg.dt;
    for (const auto& bp : bps) {
        const double a = t, b = bp.t;
        if (cfg.method == Method::Rk4) {
            const long steps = std::max(1L, static_cast<long>(std::ceil((b - a) / cfg.dt - 1e-9)));
            const double h = (b - a) / static_cast<double>(steps);
            for (long s = 0; s < steps; ++s) {
                const double ts = a + static_cast<double>(s) * h;
                prev = y;
                detail::rk4_step(sys, ts, h, y, k, tmp);
                if constexpr (HasPostStep<S>) sys.post_step(prev, y);
                detail::require_finite(y, prev, ts);
                ++st.steps;
            }
        } else {
            // Dormand-Prince 5(4) with the fifth-order solution propagated.
            static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
            static constexpr double a21 = 1.0 / 5;
            static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
            static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
            static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                                    a54 = -212.0 / 729;
            static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                                    a64 = 49.0 / 176, a65 = -5103.0 / 18656;
            static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                                    b6 = 11.0 / 84;
            static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                                    e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
            double tc = a;
            while (tc < b) {
                double h = std::min({h_adapt, cfg.dt, b - tc});
                const bool last = (tc + h >= b);
                if (h < cfg.dt_min)
                    throw IntegrationError("adaptive step underflow at t = " + std::to_string(tc), tc,
                                           std::vector<double>(y.data(), y.data() + dim));
                sys(tc, y, k[0]);
                tmp = y + h * a21 * k[0];
                sys(tc + c2 * h, tmp, k[1]);
                tmp = y + h * (a31 * k[0] + a32 * k[1]);
                sys(tc + c3 * h, tmp, k[2]);
                tmp = y + h * (a41 * k[0] + a42 * k[1] + a43 * k[2]);
                sys(tc + c4 * h, tmp, k[3]);
                tmp = y + h * (a51 * k[0] + a52 * k[1] + a53 * k[2] + a54 * k[3]);
                sys(tc + c5 * h, tmp, k[4]);
                tmp = y + h * (a61 * k[0] + a62 * k[1] + a63 * k[2] + a64 * k[3] + a65 * k[4]);
                sys(tc + h, tmp, k[5]);
                y5 = y + h * (b1 * k[0] + b3 * k[2] + b4 * k[3] + b5 * k[4] + b6 * k[5]);
                sys(tc + h, y5, k[6]);
                err = h * (e1 * k[0] + e3 * k[2] + e4 * k[3] + e5 * k[4] + e6 * k[5] + e7 * k[6]);
                const Eigen::ArrayXd scale = cfg.atol + cfg.rtol * y.cwiseAbs().cwiseMax(y5.cwiseAbs()).array();
                const double en = std::sqrt((err.array() / scale).square().mean());
                if (std::isfinite(en) && en <= 1.0) {
                    prev = y;
                    y = y5;
                    if constexpr (HasPostStep<S>) sys.post_step(prev, y);
                    detail::require_finite(y, prev, tc);
                    tc = last ? b : tc + h;
                    ++st.steps;
                    const double grow = en == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 5.0);
                    if (!last) h_adapt = h * grow;
                    else h_adapt = std::max(h_adapt, h * grow);
                } else {
                    ++st.rejected;
                    h_adapt = h * (std::isfinite(en) ? std::clamp(0.9 * std::pow(en, -0.2), 0.1, 0.9) : 0.1);
                }
            }
        }
        t = b;
        if (!bp.events.empty()) {
            if (observer) observer(t, y, SamplePhase::BeforeEvent);
            for (auto e : bp.events)
                if (on_event) on_event(e, t, y);
            if (observer) observer(t, y, SamplePhase::AfterEvent);
        } else if (bp.sample && observer) {
            observer(t, y, SamplePhase::Regular);
        }
    }
    return y;
}

} // namespace dcgrid
