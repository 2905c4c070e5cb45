#include "lrgl/hydro.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "lrgl/error.hpp"

namespace lrgl {

Grid::Grid(std::size_t cells) : cells_(cells) {
    if (cells < 8) throw ValidationError("grid needs at least 8 cells");
}

GridProfile GridProfile::from_function(const Grid& grid, const std::function<double(double)>& f) {
    GridProfile p;
    p.values.resize(grid.nodes());
    for (std::size_t j = 0; j < grid.nodes(); ++j) p.values[j] = f(grid.node(j));
    return p;
}

GridProfile GridProfile::affine(const Grid& grid, double left, double right) {
    return from_function(grid, [&](double u) { return left + (right - left) * u; });
}

double cell_pair_integral(double gamma, double a, double b, double c, double d) {
    if (!(gamma > 0.0 && gamma < 2.0)) throw DomainError("kernel exponent must lie in (0,2)");
    if (!(a < b && b <= c && c < d)) throw DomainError("cell pair integral needs ordered disjoint intervals");
    if (b == c && gamma >= 1.0) throw DomainError("adjacent cells: the plain kernel integral diverges for γ ≥ 1");
    using R = long double;
    const R g = gamma;
    // Second antiderivative of z^(−1−γ).
    auto G = [&](R z) -> R {
        if (z == 0) return 0;
        if (gamma == 1.0) return -std::log(z);
        return std::pow(z, 1 - g) / (g * (g - 1));
    };
    const R v = G(R(d) - a) - G(R(d) - b) - G(R(c) - a) + G(R(c) - b);
    return static_cast<double>(v);
}

namespace {

struct Cell {
    long double lo, hi;
};

Cell dual_cell(const Grid& grid, std::size_t j) {
    const long double h = 1.0L / grid.cells();
    const long double u = static_cast<long double>(j) * h;
    return {std::max(0.0L, u - h / 2), std::min(1.0L, u + h / 2)};
}

// ∬_{[a,b]×[c,d]} (v−u)^(1−γ), b ≤ c.
long double second_moment(long double gamma, Cell left, Cell right) {
    const long double denom = (2 - gamma) * (3 - gamma);
    auto F = [&](long double z) -> long double { return z <= 0 ? 0.0L : std::pow(z, 3 - gamma) / denom; };
    return F(right.hi - left.lo) - F(right.hi - left.hi) - F(right.lo - left.lo) + F(right.lo - left.hi);
}

Eigen::MatrixXd power_law_weights(const Grid& grid, double gamma) {
    const std::size_t m = grid.cells();
    const long double h = 1.0L / m;
    const long double g = gamma;
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(m + 1, m + 1);
    for (std::size_t i = 0; i <= m; ++i) {
        const Cell ci = dual_cell(grid, i);
        for (std::size_t k = i + 1; k <= m; ++k) {
            const Cell ck = dual_cell(grid, k);
            const long double gap = static_cast<long double>(k - i) * h;
            const double v = static_cast<double>(second_moment(g, ci, ck) / (gap * gap));
            w(i, k) = w(k, i) = v;
        }
    }
    // Self-cell moments, split between the slopes on either side of the node.
    std::vector<long double> self(m + 1);
    for (std::size_t j = 0; j <= m; ++j) {
        const Cell c = dual_cell(grid, j);
        const long double len = c.hi - c.lo;
        const long double share = (j == 0 || j == m) ? 1.0L : 0.5L;
        self[j] = share * 2 * std::pow(len, 3 - g) / ((2 - g) * (3 - g));
    }
    for (std::size_t j = 0; j < m; ++j) {
        const double extra = static_cast<double>((self[j] + self[j + 1]) / (2 * h * h));
        w(j, j + 1) += extra;
        w(j + 1, j) += extra;
    }
    return w;
}

Eigen::MatrixXd nearest_neighbor_weights(const Grid& grid) {
    const std::size_t m = grid.cells();
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(m + 1, m + 1);
    const double inv_h = static_cast<double>(m);
    for (std::size_t j = 0; j < m; ++j) w(j, j + 1) = w(j + 1, j) = inv_h;
    return w;
}

void check_profile(const WeakFormAssembly& w, const GridProfile& p) {
    if (p.values.size() != w.grid.nodes()) throw ValidationError("profile size differs from the grid");
}

// Symmetric nodal mobility B(Φ_i,Φ_k).
Eigen::MatrixXd mobility_matrix(const CoarseModel& coarse, const GridProfile& p) {
    const std::size_t n = p.values.size();
    Eigen::MatrixXd b(n, n);
    if (coarse.constant_mobility()) {
        b.setConstant(coarse.mobility(p.values[0], p.values[0]));
        return b;
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = i; k < n; ++k) b(i, k) = b(k, i) = coarse.mobility(p.values[i], p.values[k]);
    return b;
}

std::vector<double> entropy_slopes(const CoarseModel& coarse, const GridProfile& p) {
    std::vector<double> s(p.values.size());
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = coarse.entropy_slope(p.values[j]);
    return s;
}

// (1/h) Σ_i W_ij B_ij (f_i − f_j) at interior nodes.
Interior stencil(const WeakFormAssembly& w, const Eigen::MatrixXd& b, std::span<const double> f) {
    const std::size_t m = w.grid.cells();
    const double inv_h = static_cast<double>(m);
    Interior out(m - 1, 0.0);
    for (std::size_t j = 1; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i <= m; ++i) {
            if (i == j) continue;
            acc += w.weights(i, j) * b(i, j) * (f[i] - f[j]);
        }
        out[j - 1] = acc * inv_h;
    }
    return out;
}

void check_window(const CoarseModel& coarse, const GridProfile& p, std::size_t step) {
    const Interval win = coarse.window();
    for (std::size_t j = 0; j < p.values.size(); ++j) {
        const double v = p.values[j];
        if (!std::isfinite(v) || v < win.lo || v > win.hi) {
            std::ostringstream os;
            os << "hydrodynamic profile left the tabulated window at node " << j << " (value " << v << ")";
            throw NumericalError(os.str(), step);
        }
    }
}

} // namespace

WeakFormAssembly assemble_weights(const Grid& grid, const KernelSpec& kernel) {
    kernel.validate();
    WeakFormAssembly out;
    out.grid = grid;
    out.kernel = kernel;
    switch (kernel.kind) {
    case KernelSpec::Kind::power_law: out.weights = power_law_weights(grid, kernel.gamma); break;
    case KernelSpec::Kind::nearest_neighbor: out.weights = nearest_neighbor_weights(grid); break;
    case KernelSpec::Kind::mixed:
        out.weights = kernel.amplitude * nearest_neighbor_weights(grid) + power_law_weights(grid, kernel.gamma);
        break;
    }
    out.row_sums.resize(grid.nodes());
    for (std::size_t j = 0; j < grid.nodes(); ++j) out.row_sums[j] = out.weights.col(static_cast<Eigen::Index>(j)).sum();
    return out;
}

std::string assembly_key(const Grid& grid, const KernelSpec& kernel) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "M%zu_k%d_g%a_a%a", grid.cells(), static_cast<int>(kernel.kind), kernel.gamma,
                  kernel.amplitude);
    std::string key = buf;
    std::replace(key.begin(), key.end(), '.', 'p');
    std::replace(key.begin(), key.end(), '+', 'P');
    std::replace(key.begin(), key.end(), '-', 'm');
    return key;
}

namespace {
constexpr char kMagic[8] = {'L', 'R', 'G', 'L', 'W', '0', '0', '1'};
}

void save_assembly(const WeakFormAssembly& w, const std::string& path) {
    const std::string key = assembly_key(w.grid, w.kernel);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error("cannot write assembly cache " + tmp);
        out.write(kMagic, sizeof kMagic);
        const std::uint64_t len = key.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(key.data(), static_cast<std::streamsize>(len));
        const std::uint64_t m = w.grid.cells();
        out.write(reinterpret_cast<const char*>(&m), sizeof m);
        out.write(reinterpret_cast<const char*>(&w.kernel.gamma), sizeof(double));
        out.write(reinterpret_cast<const char*>(&w.kernel.amplitude), sizeof(double));
        const int kind = static_cast<int>(w.kernel.kind);
        out.write(reinterpret_cast<const char*>(&kind), sizeof kind);
        out.write(reinterpret_cast<const char*>(w.weights.data()),
                  static_cast<std::streamsize>(sizeof(double) * w.weights.size()));
        if (!out) throw Error("short write to assembly cache " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

WeakFormAssembly load_assembly(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open assembly cache " + path);
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || !std::equal(magic, magic + 8, kMagic)) throw ValidationError("not an assembly cache: " + path);
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (len > 4096) throw ValidationError("corrupt assembly cache: " + path);
    std::string key(len, '\0');
    in.read(key.data(), static_cast<std::streamsize>(len));
    std::uint64_t m = 0;
    in.read(reinterpret_cast<char*>(&m), sizeof m);
    KernelSpec kernel;
    in.read(reinterpret_cast<char*>(&kernel.gamma), sizeof(double));
    in.read(reinterpret_cast<char*>(&kernel.amplitude), sizeof(double));
    int kind = 0;
    in.read(reinterpret_cast<char*>(&kind), sizeof kind);
    if (!in || kind < 0 || kind > 2 || m < 8 || m > (1u << 16)) throw ValidationError("corrupt assembly cache: " + path);
    kernel.kind = static_cast<KernelSpec::Kind>(kind);
    WeakFormAssembly out;
    out.grid = Grid(m);
    out.kernel = kernel;
    if (assembly_key(out.grid, kernel) != key) throw ValidationError("assembly cache key mismatch: " + path);
    out.weights.resize(static_cast<Eigen::Index>(m + 1), static_cast<Eigen::Index>(m + 1));
    in.read(reinterpret_cast<char*>(out.weights.data()), static_cast<std::streamsize>(sizeof(double) * out.weights.size()));
    if (!in) throw ValidationError("truncated assembly cache: " + path);
    out.row_sums.resize(m + 1);
    for (std::size_t j = 0; j <= m; ++j) out.row_sums[j] = out.weights.col(static_cast<Eigen::Index>(j)).sum();
    return out;
}

WeakFormAssembly cached_assembly(const Grid& grid, const KernelSpec& kernel, const std::string& directory) {
    const std::filesystem::path path = std::filesystem::path(directory) / ("W_" + assembly_key(grid, kernel) + ".bin");
    if (std::filesystem::exists(path)) {
        try {
            return load_assembly(path.string());
        } catch (const Error&) {
            // stale or damaged: rebuild below
        }
    }
    WeakFormAssembly w = assemble_weights(grid, kernel);
    std::filesystem::create_directories(directory);
    save_assembly(w, path.string());
    return w;
}

Eigen::MatrixXd nodal_mobility(const CoarseModel& coarse, const GridProfile& profile) {
    return mobility_matrix(coarse, profile);
}

Interior apply_A(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile) {
    check_profile(w, profile);
    const std::vector<double> s = entropy_slopes(coarse, profile);
    return stencil(w, mobility_matrix(coarse, profile), s);
}

Interior apply_A_by_quadrature(const WeakFormAssembly& w, const ModelSpec& model, const ThermoTable& thermo,
                               const GridProfile& profile) {
    check_profile(w, profile);
    const std::size_t m = w.grid.cells();
    const double inv_h = static_cast<double>(m);
    Interior out(m - 1, 0.0);
    std::map<std::pair<double, double>, double> memo;
    for (std::size_t j = 1; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i <= m; ++i) {
            if (i == j) continue;
            const auto key = std::make_pair(profile.values[j], profile.values[i]);
            auto it = memo.find(key);
            if (it == memo.end()) it = memo.emplace(key, coarse_A(model, thermo, key.first, key.second)).first;
            acc += w.weights(i, j) * it->second;
        }
        out[j - 1] = acc * inv_h;
    }
    return out;
}

Interior apply_B(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                 std::span<const double> drive) {
    check_profile(w, profile);
    if (drive.size() != w.grid.nodes()) throw ValidationError("drive must be given at every node");
    if (drive.front() != 0.0 || drive.back() != 0.0) throw ValidationError("drive must vanish at both ends");
    return stencil(w, mobility_matrix(coarse, profile), drive);
}

Interior apply_B_unrestricted(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                              std::span<const double> field) {
    check_profile(w, profile);
    if (field.size() != w.grid.nodes()) throw ValidationError("field must be given at every node");
    return stencil(w, mobility_matrix(coarse, profile), field);
}

double mobility_form(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                     std::span<const double> drive) {
    check_profile(w, profile);
    if (drive.size() != w.grid.nodes()) throw ValidationError("drive must be given at every node");
    const Eigen::MatrixXd b = mobility_matrix(coarse, profile);
    const std::size_t n = w.grid.nodes();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = i + 1; k < n; ++k) {
            const double d = drive[k] - drive[i];
            acc += w.weights(i, k) * b(i, k) * d * d;
        }
    return acc;
}

double pairing(const Grid& grid, std::span<const double> f, std::span<const double> g) {
    if (f.size() != g.size()) throw ValidationError("pairing of vectors with different sizes");
    double acc = 0.0;
    for (std::size_t j = 0; j < f.size(); ++j) acc += f[j] * g[j];
    return acc * grid.spacing();
}

double explicit_time_step_bound(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile) {
    check_profile(w, profile);
    const auto [lo_it, hi_it] = std::minmax_element(profile.values.begin(), profile.values.end());
    const Interval win = coarse.window();
    const double pad = 0.05 * (*hi_it - *lo_it);
    const double lo = std::max(win.lo, *lo_it - pad), hi = std::min(win.hi, *hi_it + pad);
    double sup_curv = 0.0, sup_b = 0.0;
    constexpr int pts = 16;
    for (int a = 0; a <= pts; ++a) {
        const double x = lo + (hi - lo) * a / pts;
        sup_curv = std::max(sup_curv, coarse.entropy_curvature(x));
        for (int c = 0; c <= pts; ++c) sup_b = std::max(sup_b, coarse.mobility(x, lo + (hi - lo) * c / pts));
    }
    const double max_row = *std::max_element(w.row_sums.begin(), w.row_sums.end());
    const double rate = max_row * static_cast<double>(w.grid.cells()) * sup_b * sup_curv;
    return 1.0 / rate;
}

HydroTrajectory evolve(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& initial, double horizon,
                       const EvolveOptions& options) {
    check_profile(w, initial);
    if (!(horizon >= 0.0)) throw ValidationError("horizon must be non-negative");
    check_window(coarse, initial, 0);
    const double bound = explicit_time_step_bound(w, coarse, initial);
    double dt = options.dt > 0.0 ? options.dt : 0.9 * bound;
    if (dt > bound * (1.0 + 1e-9)) {
        std::ostringstream os;
        os << "time step " << dt << " exceeds the explicit stability bound " << bound;
        throw ValidationError(os.str());
    }
    const std::size_t steps = horizon == 0.0 ? 0 : static_cast<std::size_t>(std::ceil(horizon / dt - 1e-9));
    if (steps > 0) dt = horizon / static_cast<double>(steps);
    const std::size_t stride = std::max<std::size_t>(1, options.record_stride);
    const std::size_t m = w.grid.cells();

    HydroTrajectory traj;
    traj.times.push_back(0.0);
    traj.profiles.push_back(initial);
    GridProfile cur = initial;
    std::vector<double> h(m + 1, 0.0);
    const double initial_scale = std::max(1.0, std::abs(*std::max_element(
        initial.values.begin(), initial.values.end(), [](double a, double b) { return std::abs(a) < std::abs(b); })));
    for (std::size_t k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) * dt;
        const std::vector<double> s = entropy_slopes(coarse, cur);
        const Eigen::MatrixXd b = mobility_matrix(coarse, cur);
        Interior rhs = stencil(w, b, s);
        if (options.drive.active()) {
            for (std::size_t j = 1; j < m; ++j) h[j] = options.drive(t, w.grid.node(j));
            const Interior bh = stencil(w, b, h);
            for (std::size_t j = 0; j + 1 < m; ++j) rhs[j] -= bh[j];
        }
        for (std::size_t j = 1; j < m; ++j) cur.values[j] += dt * rhs[j - 1];
        for (std::size_t j = 1; j < m; ++j)
            if (!std::isfinite(cur.values[j]) || std::abs(cur.values[j]) > 1e6 * initial_scale)
                throw NumericalError("explicit hydrodynamic step blew up", k + 1);
        check_window(coarse, cur, k + 1);
        if ((k + 1) % stride == 0 || k + 1 == steps) {
            traj.times.push_back(static_cast<double>(k + 1) * dt);
            traj.profiles.push_back(cur);
        }
    }
    return traj;
}

namespace {

// Weak residual F_j = Σ_i W_ij B_ij (s_i − s_j) at interior nodes.
Eigen::VectorXd weak_residual(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& p) {
    const std::size_t m = w.grid.cells();
    const Interior a = apply_A(w, coarse, p);
    Eigen::VectorXd f(static_cast<Eigen::Index>(m - 1));
    for (std::size_t j = 0; j + 1 < m; ++j) f[static_cast<Eigen::Index>(j)] = a[j] * w.grid.spacing();
    return f;
}

Eigen::MatrixXd weak_jacobian(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& p) {
    const std::size_t m = w.grid.cells();
    const std::vector<double> s = entropy_slopes(coarse, p);
    std::vector<double> curv(m + 1);
    for (std::size_t j = 0; j <= m; ++j) curv[j] = coarse.entropy_curvature(p.values[j]);
    const Eigen::MatrixXd b = mobility_matrix(coarse, p);
    const bool constant = coarse.constant_mobility();
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m - 1), static_cast<Eigen::Index>(m - 1));
    for (std::size_t j = 1; j < m; ++j) {
        double diag = 0.0;
        for (std::size_t i = 0; i <= m; ++i) {
            if (i == j) continue;
            const double wij = w.weights(i, j);
            if (wij == 0.0) continue;
            const double ds = s[i] - s[j];
            const double d_own = constant ? 0.0 : coarse.mobility_d1(p.values[j], p.values[i]);
            diag += wij * (d_own * ds - b(i, j) * curv[j]);
            if (i >= 1 && i < m) {
                const double d_other = constant ? 0.0 : coarse.mobility_d1(p.values[i], p.values[j]);
                jac(static_cast<Eigen::Index>(j - 1), static_cast<Eigen::Index>(i - 1)) =
                    wij * (d_other * ds + b(i, j) * curv[i]);
            }
        }
        jac(static_cast<Eigen::Index>(j - 1), static_cast<Eigen::Index>(j - 1)) = diag;
    }
    return jac;
}

bool inside(const CoarseModel& coarse, const GridProfile& p) {
    const Interval win = coarse.window();
    for (double v : p.values)
        if (!std::isfinite(v) || v < win.lo || v > win.hi) return false;
    return true;
}

} // namespace

StationaryReport solve_stationary(const WeakFormAssembly& w, const CoarseModel& coarse, double left, double right,
                                  double tolerance) {
    const Interval win = coarse.window();
    if (left < win.lo || left > win.hi || right < win.lo || right > win.hi)
        throw RangeError("bath densities outside the tabulated window");
    const std::size_t m = w.grid.cells();
    StationaryReport rep;
    rep.profile = GridProfile::affine(w.grid, left, right);
    Eigen::VectorXd f = weak_residual(w, coarse, rep.profile);
    double res = f.lpNorm<Eigen::Infinity>();

    auto newton = [&](std::size_t max_iter) {
        for (std::size_t it = 0; it < max_iter && res > tolerance; ++it) {
            ++rep.iterations;
            const Eigen::VectorXd step = weak_jacobian(w, coarse, rep.profile).partialPivLu().solve(-f);
            if (!step.allFinite()) return false;
            double t = 1.0;
            bool accepted = false;
            while (t > 1e-6) {
                GridProfile trial = rep.profile;
                for (std::size_t j = 1; j < m; ++j) trial.values[j] += t * step[static_cast<Eigen::Index>(j - 1)];
                if (inside(coarse, trial)) {
                    const Eigen::VectorXd ft = weak_residual(w, coarse, trial);
                    const double rt = ft.lpNorm<Eigen::Infinity>();
                    if (rt < res) {
                        rep.profile = std::move(trial);
                        f = ft;
                        res = rt;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if (!accepted) return res <= tolerance;
        }
        return res <= tolerance;
    };

    if (!newton(60)) {
        rep.used_fallback = true;
        EvolveOptions opts;
        opts.record_stride = std::numeric_limits<std::size_t>::max();
        const HydroTrajectory tr = evolve(w, coarse, rep.profile, 2.0, opts);
        rep.profile = tr.profiles.back();
        f = weak_residual(w, coarse, rep.profile);
        res = f.lpNorm<Eigen::Infinity>();
        if (!newton(60)) {
            std::ostringstream os;
            os << "stationary Newton solve stalled at weak residual " << res;
            throw ConvergenceError(os.str());
        }
    }
    rep.residual = res;
    return rep;
}

double macroscopic_current(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile, double u) {
    check_profile(w, profile);
    if (!(u >= 0.0 && u <= 1.0)) throw DomainError("current position must lie in [0,1]");
    const std::size_t m = w.grid.cells();
    const std::size_t cut = std::min(m - 1, static_cast<std::size_t>(std::floor(u * static_cast<double>(m))));
    const std::vector<double> s = entropy_slopes(coarse, profile);
    double acc = 0.0;
    for (std::size_t j = 0; j <= cut; ++j)
        for (std::size_t i = cut + 1; i <= m; ++i) {
            const double wij = w.weights(i, j);
            if (wij == 0.0) continue;
            acc -= wij * coarse.mobility(profile.values[i], profile.values[j]) * (s[i] - s[j]);
        }
    return acc;
}

double diffusive_limit_form(const WeakFormAssembly& w, std::span<const double> g, std::span<const double> h) {
    const std::size_t n = w.grid.nodes();
    if (g.size() != n || h.size() != n) throw ValidationError("test functions must be given at every node");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = i + 1; k < n; ++k) acc += w.weights(i, k) * (g[k] - g[i]) * (h[k] - h[i]);
    // acc approximates ½∬K ΔG ΔH.
    if (w.kernel.kind == KernelSpec::Kind::nearest_neighbor) return acc;
    return (2.0 - w.kernel.gamma) * acc;
}

double diffusion_coefficient(const ModelSpec& model, const ThermoTable& thermo, double density) {
    return thermo.entropy_curvature(density) * coarse_B(model, thermo, density, density);
}

std::vector<WindowMonomial> monomial_basis(std::size_t window, int max_power) {
    if (window < 1 || window > 2) throw ValidationError("window width must be 1 or 2");
    if (max_power < 1) throw ValidationError("monomial degree must be positive");
    std::vector<WindowMonomial> out;
    for (int a = 1; a <= max_power; ++a) {
        if (window == 1) {
            out.push_back({{a}});
            continue;
        }
        // φ(1)^b alone is a shift of φ(0)^b.
        for (int b = 0; b <= max_power; ++b) out.push_back({{a, b}});
    }
    return out;
}

namespace {

// Polynomial in φ at sites lo..lo+width−1.
using Monomial = std::vector<int>;
using Poly = std::map<Monomial, double>;

Poly multiply(const Poly& p, const Poly& q) {
    Poly out;
    for (const auto& [ea, ca] : p)
        for (const auto& [eb, cb] : q) {
            Monomial e(ea.size());
            for (std::size_t s = 0; s < e.size(); ++s) e[s] = ea[s] + eb[s];
            out[e] += ca * cb;
        }
    return out;
}

} // namespace

GreenKuboResult green_kubo_upper(const ModelSpec& model, const ThermoTable& thermo, double density,
                                 const std::vector<WindowMonomial>& basis) {
    std::size_t window = 1;
    for (const auto& g : basis) {
        if (g.exponents.empty() || g.exponents.size() > 2) throw ValidationError("basis windows must have width 1 or 2");
        window = std::max(window, g.exponents.size());
    }
    // Sites touched: 2−window .. 1+window, stored from offset lo.
    const int lo = 2 - static_cast<int>(window);
    const std::size_t width = 2 * window;
    auto site = [&](int x) { return static_cast<std::size_t>(x - lo); };

    // β(φ(1), φ(2)) as a polynomial.
    Poly beta;
    const MobilitySpec& mob = model.mobility;
    auto mono = [&](int a, int b) {
        Monomial e(width, 0);
        e[site(1)] = a;
        e[site(2)] = b;
        return e;
    };
    switch (mob.family) {
    case MobilitySpec::Family::constant: beta[mono(0, 0)] = mob.scale; break;
    case MobilitySpec::Family::product: beta[mono(1, 1)] = mob.scale; break;
    case MobilitySpec::Family::polynomial:
        for (std::size_t a = 0; a < mob.coefficients.size(); ++a)
            for (std::size_t b = 0; b < mob.coefficients[a].size(); ++b)
                if (mob.coefficients[a][b] != 0.0) beta[mono(static_cast<int>(a), static_cast<int>(b))] += mob.coefficients[a][b];
        break;
    }

    // (∂₁ − ∂₂) Σ_x τ_x g for each basis monomial.
    std::vector<Poly> grads;
    std::vector<std::size_t> used;
    for (std::size_t gi = 0; gi < basis.size(); ++gi) {
        const WindowMonomial& g = basis[gi];
        Poly p;
        for (int target : {1, 2}) {
            const double sign = target == 1 ? 1.0 : -1.0;
            for (std::size_t j = 0; j < g.exponents.size(); ++j) {
                if (g.exponents[j] == 0) continue;
                const int shift = target - static_cast<int>(j);
                Monomial e(width, 0);
                for (std::size_t i = 0; i < g.exponents.size(); ++i)
                    e[site(shift + static_cast<int>(i))] += g.exponents[i] - (i == j ? 1 : 0);
                p[e] += sign * g.exponents[j];
            }
        }
        std::erase_if(p, [](const auto& kv) { return kv.second == 0.0; });
        if (!p.empty()) {
            grads.push_back(std::move(p));
            used.push_back(gi);
        }
    }

    const GibbsRule rule = thermo.rule_at_density(density);
    std::map<int, double> moments;
    auto moment = [&](int k) {
        auto it = moments.find(k);
        if (it == moments.end()) it = moments.emplace(k, k == 0 ? 1.0 : rule.raw_moment(k)).first;
        return it->second;
    };
    auto expect = [&](const Poly& p) {
        double acc = 0.0;
        for (const auto& [e, c] : p) {
            double v = c;
            for (int k : e) v *= moment(k);
            acc += v;
        }
        return acc;
    };

    GreenKuboResult out;
    const double curvature = thermo.entropy_curvature(density);
    const double e0 = expect(beta);
    out.diffusion = curvature * e0;
    const auto nb = static_cast<Eigen::Index>(grads.size());
    if (nb == 0) {
        out.upper_bound = out.diffusion;
        out.coefficients.assign(basis.size(), 0.0);
        return out;
    }
    Eigen::MatrixXd gram(nb, nb);
    Eigen::VectorXd rhs(nb);
    for (Eigen::Index a = 0; a < nb; ++a) {
        const Poly ba = multiply(beta, grads[static_cast<std::size_t>(a)]);
        rhs[a] = expect(ba);
        for (Eigen::Index b = a; b < nb; ++b) gram(a, b) = gram(b, a) = expect(multiply(ba, grads[static_cast<std::size_t>(b)]));
    }
    // Minimise E[β(1−Σc_aψ_a)²]; drop directions the Gram matrix cannot resolve.
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    const Eigen::VectorXd ev = eig.eigenvalues();
    const double cutoff = 1e-12 * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
    Eigen::VectorXd proj = eig.eigenvectors().transpose() * rhs;
    double gain = 0.0;
    Eigen::VectorXd coef_eig = Eigen::VectorXd::Zero(nb);
    for (Eigen::Index k = 0; k < nb; ++k) {
        if (ev[k] <= cutoff) {
            out.regularized = true;
            continue;
        }
        coef_eig[k] = proj[k] / ev[k];
        gain += proj[k] * proj[k] / ev[k];
    }
    const Eigen::VectorXd coef = eig.eigenvectors() * coef_eig;
    out.coefficients.assign(basis.size(), 0.0);
    for (Eigen::Index a = 0; a < nb; ++a) out.coefficients[used[static_cast<std::size_t>(a)]] = coef[a];
    out.upper_bound = curvature * std::max(0.0, e0 - gain);
    return out;
}

void write_profile_csv(std::ostream& out, const Grid& grid, const GridProfile& profile, const std::string& meta) {
    out << "# " << meta << "\n";
    out << "u,Phi\n";
    out.precision(17);
    for (std::size_t j = 0; j < profile.values.size(); ++j) out << grid.node(j) << ',' << profile.values[j] << '\n';
}

} // namespace lrgl
