#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fueterlab {

enum class Domain { torus, box };

inline const char* domain_name(Domain d) { return d == Domain::torus ? "torus" : "box"; }

// Uniform grid on [0,L)^D (torus) or [-L,L]^D (box), D = 4m.
struct Grid {
    int m = 1;
    int n = 1;
    Domain domain = Domain::box;
    double L = 1;
    double h = 0.25;
    std::vector<int> dims;
    std::vector<std::size_t> strides;

    Grid() = default;
    Grid(int m_, int n_, Domain d, double L_, double h_, std::vector<int> dims_)
        : m(m_), n(n_), domain(d), L(L_), h(h_), dims(std::move(dims_)) {
        validate();
    }

    static Grid box(int m, int n, double L, double h) {
        int d = static_cast<int>(std::lround(2 * L / h)) + 1;
        return Grid(m, n, Domain::box, L, h, std::vector<int>(4 * m, d));
    }
    static Grid torus(int m, int n, double L, double h) {
        int d = static_cast<int>(std::lround(L / h));
        return Grid(m, n, Domain::torus, L, h, std::vector<int>(4 * m, d));
    }

    void validate() {
        if (m < 1 || n < 1) throw std::invalid_argument("Grid: m, n must be >= 1");
        if (!(h > 0) || !(L > 0)) throw std::invalid_argument("Grid: L, h must be positive");
        if (static_cast<int>(dims.size()) != 4 * m)
            throw std::invalid_argument("Grid: need 4m axes");
        for (int d : dims)
            if (d < 5) throw std::invalid_argument("Grid: at least 5 nodes per axis");
        strides.assign(dims.size(), 1);
        for (int a = static_cast<int>(dims.size()) - 2; a >= 0; --a)
            strides[a] = strides[a + 1] * static_cast<std::size_t>(dims[a + 1]);
    }

    int dim() const { return 4 * m; }
    int components() const { return 4 * n; }
    std::size_t node_count() const { return strides[0] * static_cast<std::size_t>(dims[0]); }
    double cell_volume() const { return std::pow(h, dim()); }
    double origin() const { return domain == Domain::box ? -L : 0.0; }
    double coord(int i) const { return origin() + i * h; }

    void unravel(std::size_t lin, int* idx) const {
        for (int a = 0; a < dim(); ++a) {
            idx[a] = static_cast<int>(lin / strides[a]);
            lin -= static_cast<std::size_t>(idx[a]) * strides[a];
        }
    }
    std::size_t ravel(const int* idx) const {
        std::size_t lin = 0;
        for (int a = 0; a < dim(); ++a) lin += static_cast<std::size_t>(idx[a]) * strides[a];
        return lin;
    }
    void position(std::size_t lin, double* x) const {
        std::size_t r = lin;
        for (int a = 0; a < dim(); ++a) {
            std::size_t i = r / strides[a];
            r -= i * strides[a];
            x[a] = origin() + static_cast<double>(i) * h;
        }
    }
    // distance (in nodes) to the nearest box face; large on a torus
    int boundary_distance(const int* idx) const {
        if (domain == Domain::torus) return 1 << 30;
        int d = 1 << 30;
        for (int a = 0; a < dim(); ++a) d = std::min({d, idx[a], dims[a] - 1 - idx[a]});
        return d;
    }
    bool interior(const int* idx, int width = 2) const { return boundary_distance(idx) >= width; }

    // linear index of idx + s*e_a, wrapping on the torus; -1 if it leaves the box
    long long shift(std::size_t lin, const int* idx, int a, int s) const {
        int j = idx[a] + s;
        if (domain == Domain::torus) {
            j %= dims[a];
            if (j < 0) j += dims[a];
        } else if (j < 0 || j >= dims[a]) {
            return -1;
        }
        return static_cast<long long>(lin) + (static_cast<long long>(j) - idx[a]) *
                                                 static_cast<long long>(strides[a]);
    }

    bool same_shape(const Grid& o) const {
        return m == o.m && n == o.n && domain == o.domain && dims == o.dims && h == o.h &&
               L == o.L;
    }
};

// Stored samples, innermost index the 4n target components.
class GridField {
public:
    GridField() = default;
    explicit GridField(Grid g) : grid_(std::move(g)) {
        data_.assign(grid_.node_count() * grid_.components(), 0.0);
    }

    template <class F>
    static GridField sample(const Grid& g, F&& f) {
        GridField u(g);
        std::vector<double> x(g.dim());
        for (std::size_t lin = 0; lin < g.node_count(); ++lin) {
            g.position(lin, x.data());
            f(x.data(), u.data_.data() + lin * g.components());
        }
        return u;
    }

    const Grid& grid() const { return grid_; }
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    double* at(std::size_t lin) { return data_.data() + lin * grid_.components(); }
    const double* at(std::size_t lin) const { return data_.data() + lin * grid_.components(); }
    void value(std::size_t lin, double* out) const {
        std::memcpy(out, at(lin), sizeof(double) * grid_.components());
    }

private:
    Grid grid_;
    std::vector<double> data_;
};

// Lazily evaluated field: f(x, out) at node positions. Used where storing the
// full 4m-dimensional array is not affordable.
template <class F>
class FunctionField {
public:
    FunctionField(Grid g, F f) : grid_(std::move(g)), f_(std::move(f)) {}
    const Grid& grid() const { return grid_; }
    void value(std::size_t lin, double* out) const {
        double x[16];
        grid_.position(lin, x);
        f_(x, out);
    }
    void value_at(const double* x, double* out) const { f_(x, out); }

private:
    Grid grid_;
    F f_;
};

// ---- FLD1 I/O --------------------------------------------------------------

inline std::string fld1_header(const Grid& g) {
    std::ostringstream os;
    os.precision(17);
    os << "FLD1 m=" << g.m << " n=" << g.n << " domain=" << domain_name(g.domain) << " L=" << g.L
       << " h=" << g.h << " dims=";
    for (std::size_t a = 0; a < g.dims.size(); ++a) os << (a ? "," : "") << g.dims[a];
    return os.str();
}

namespace detail {
inline bool host_is_little_endian() {
    std::uint16_t one = 1;
    unsigned char b;
    std::memcpy(&b, &one, 1);
    return b == 1;
}
inline void byteswap8(unsigned char* p) {
    for (int i = 0; i < 4; ++i) std::swap(p[i], p[7 - i]);
}
}  // namespace detail

inline void write_fld1(std::ostream& os, const GridField& u) {
    os << fld1_header(u.grid()) << '\n';
    const auto& d = u.data();
    if (detail::host_is_little_endian()) {
        os.write(reinterpret_cast<const char*>(d.data()),
                 static_cast<std::streamsize>(d.size() * sizeof(double)));
    } else {
        for (double v : d) {
            unsigned char b[8];
            std::memcpy(b, &v, 8);
            detail::byteswap8(b);
            os.write(reinterpret_cast<const char*>(b), 8);
        }
    }
    if (!os) throw std::runtime_error("write_fld1: stream failure");
}

inline void write_fld1(const std::string& path, const GridField& u) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_fld1: cannot open " + path);
    write_fld1(os, u);
}

inline GridField read_fld1(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("FLD1: missing header");
    std::istringstream hs(line);
    std::string tok;
    hs >> tok;
    if (tok != "FLD1") throw std::runtime_error("FLD1: bad magic");
    int m = -1, n = -1;
    double L = -1, h = -1;
    Domain dom = Domain::box;
    bool have_dom = false;
    std::vector<int> dims;
    while (hs >> tok) {
        auto eq = tok.find('=');
        if (eq == std::string::npos) throw std::runtime_error("FLD1: malformed field " + tok);
        std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        try {
            if (key == "m") m = std::stoi(val);
            else if (key == "n") n = std::stoi(val);
            else if (key == "L") L = std::stod(val);
            else if (key == "h") h = std::stod(val);
            else if (key == "domain") {
                if (val == "torus") dom = Domain::torus;
                else if (val == "box") dom = Domain::box;
                else throw std::runtime_error("FLD1: unknown domain " + val);
                have_dom = true;
            } else if (key == "dims") {
                std::istringstream ds(val);
                std::string part;
                while (std::getline(ds, part, ',')) dims.push_back(std::stoi(part));
            } else {
                throw std::runtime_error("FLD1: unknown key " + key);
            }
        } catch (const std::logic_error&) {
            throw std::runtime_error("FLD1: bad value in " + tok);
        }
    }
    if (m < 1 || n < 1 || !(L > 0) || !(h > 0) || !have_dom || dims.empty())
        throw std::runtime_error("FLD1: incomplete header");
    Grid g;
    try {
        g = Grid(m, n, dom, L, h, dims);
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error(std::string("FLD1: ") + e.what());
    }
    GridField u(g);
    auto& d = u.data();
    is.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
    if (static_cast<std::size_t>(is.gcount()) != d.size() * sizeof(double))
        throw std::runtime_error("FLD1: truncated payload");
    if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("FLD1: trailing bytes");
    if (!detail::host_is_little_endian())
        for (double& v : d) detail::byteswap8(reinterpret_cast<unsigned char*>(&v));
    for (double v : d)
        if (!std::isfinite(v)) throw std::runtime_error("FLD1: non-finite value");
    return u;
}

inline GridField read_fld1(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("FLD1: cannot open " + path);
    return read_fld1(is);
}

}  // namespace fueterlab
