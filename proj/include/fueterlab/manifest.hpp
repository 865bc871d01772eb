#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "bubbletree.hpp"

namespace fueterlab {

using json = nlohmann::ordered_json;

inline constexpr const char* kManifestFormat = "fueterlab-manifest/1";
inline constexpr const char* kTreeFormat = "fueterlab-bubbletree/1";

namespace detail {

inline json vec(const Vec2& v) { return json::array({v(0), v(1)}); }

inline Vec2 vec2(const json& j) {
    if (!j.is_array() || j.size() != 2) throw std::invalid_argument("manifest: expected [x, y]");
    return {j[0].get<double>(), j[1].get<double>()};
}

inline ProfileKind profile_kind(const std::string& s) {
    if (s == "core") return ProfileKind::core;
    if (s == "ring") return ProfileKind::ring;
    throw std::invalid_argument("manifest: unknown profile '" + s + "'");
}

}  // namespace detail

inline json to_json(const BubbleSpec& b) {
    json j;
    j["profile"] = profile_name(b.profile.kind);
    j["beta"] = b.profile.beta;
    j["amplitude"] = b.profile.amplitude;
    j["center"] = detail::vec(b.center);
    if (b.drifting) {
        j["law"] = "drifting";
        j["rho0"] = b.rho0;
        j["drift"] = b.drift;
        j["angle"] = b.angle;
        j["delta_over_rho"] = b.delta_over_rho;
    } else {
        j["law"] = "geometric";
        j["delta0"] = b.delta0;
        j["ratio"] = b.ratio;
    }
    if (b.target.size()) j["target"] = std::vector<double>(b.target.data(), b.target.data() + b.target.size());
    return j;
}

inline BubbleSpec bubble_from_json(const json& j) {
    BubbleSpec b;
    b.profile.kind = detail::profile_kind(j.at("profile").get<std::string>());
    b.profile.beta = j.value("beta", 0.5);
    b.profile.amplitude = j.value("amplitude", 1.0);
    if (j.contains("center")) b.center = detail::vec2(j["center"]);
    std::string law = j.value("law", "geometric");
    if (law == "drifting") {
        b.drifting = true;
        b.rho0 = j.at("rho0").get<double>();
        b.drift = j.at("drift").get<double>();
        b.angle = j.value("angle", 0.0);
        b.delta_over_rho = j.at("delta_over_rho").get<double>();
    } else if (law == "geometric") {
        b.delta0 = j.at("delta0").get<double>();
        b.ratio = j.at("ratio").get<double>();
    } else {
        throw std::invalid_argument("manifest: unknown scale law '" + law + "'");
    }
    if (j.contains("target")) {
        auto t = j["target"].get<std::vector<double>>();
        b.target = Eigen::Map<Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
    }
    return b;
}

// energies: per-bubble reference values stored with the sequence
inline json to_json(const SequenceSpec& s, const std::vector<double>& energies = {}) {
    json j;
    j["format"] = kManifestFormat;
    j["name"] = s.name;
    j["n"] = s.n;
    j["structure"] = json::array({s.structure.a, s.structure.b, s.structure.c});
    j["base_gradient"] = s.base_gradient;
    j["base_seed"] = s.base_seed;
    j["levels"] = s.levels;
    j["scale"] = s.scale;
    j["noise"] = {{"amplitude", s.noise_amplitude},
                  {"sigma", s.noise_sigma},
                  {"wavenumber", s.noise_wavenumber},
                  {"center", detail::vec(s.noise_center)}};
    j["bubbles"] = json::array();
    for (const auto& b : s.bubbles) j["bubbles"].push_back(to_json(b));
    if (!energies.empty()) j["energies"] = energies;
    return j;
}

struct Manifest {
    SequenceSpec spec;
    std::vector<double> energies;  // empty if the file has none
};

inline Manifest manifest_from_json(const json& j) {
    if (j.value("format", "") != kManifestFormat)
        throw std::invalid_argument("manifest: missing or unknown format tag");
    Manifest m;
    SequenceSpec& s = m.spec;
    s.name = j.value("name", "sequence");
    s.n = j.value("n", 1);
    if (j.contains("structure")) {
        auto v = j["structure"].get<std::vector<double>>();
        if (v.size() != 3) throw std::invalid_argument("manifest: structure needs 3 entries");
        s.structure = {v[0], v[1], v[2]};
    }
    s.base_gradient = j.value("base_gradient", s.base_gradient);
    s.base_seed = j.value("base_seed", s.base_seed);
    if (j.contains("levels")) s.levels = j["levels"].get<std::vector<int>>();
    s.scale = j.value("scale", 1.0);
    if (j.contains("noise")) {
        const json& n = j["noise"];
        s.noise_amplitude = n.value("amplitude", 0.0);
        s.noise_sigma = n.value("sigma", s.noise_sigma);
        s.noise_wavenumber = n.value("wavenumber", s.noise_wavenumber);
        if (n.contains("center")) s.noise_center = detail::vec2(n["center"]);
    }
    for (const auto& b : j.value("bubbles", json::array())) s.bubbles.push_back(bubble_from_json(b));
    if (j.contains("energies")) m.energies = j["energies"].get<std::vector<double>>();
    if (!m.energies.empty() && m.energies.size() != s.bubbles.size())
        throw std::invalid_argument("manifest: one energy per bubble expected");
    return m;
}

inline Manifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("manifest: ") + e.what());
    }
    return manifest_from_json(j);
}

inline json to_json(const BubbleConfig& c) {
    return {{"eps0", c.eps0},
            {"eps1", c.eps1},
            {"window", c.window},
            {"max_scale", c.max_scale},
            {"density_radii", c.density_radii},
            {"density_tol", c.density_tol},
            {"neck_dt", c.neck_dt},
            {"neck_ntheta", c.neck_ntheta},
            {"neck_window", c.neck_window},
            {"neck_separation", c.neck_separation},
            {"offcenter_ratio", c.offcenter_ratio},
            {"convergence_tol", c.convergence_tol},
            {"compact_radius", c.compact_radius},
            {"depth_cap", c.depth_cap},
            {"slice_grid", c.slice_grid},
            {"slice_halfwidth", c.slice_halfwidth},
            {"slice_maximal", c.slice_maximal},
            {"slice_lorentz", c.slice_lorentz},
            {"detect_halfwidth", c.detect_halfwidth},
            {"detect_spacing", c.detect_spacing},
            {"detect_slack", c.detect_slack},
            {"mesh", {{"background", c.mesh.background}, {"dt", c.mesh.dt},
                      {"ntheta", c.mesh.ntheta}, {"depth", c.mesh.depth}}}};
}

// unknown keys are rejected so that typos do not silently fall back to defaults
inline BubbleConfig bubble_config_from_json(const json& j) {
    BubbleConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const json& v = it.value();
        if (k == "eps0") c.eps0 = v.get<double>();
        else if (k == "eps1") c.eps1 = v.get<double>();
        else if (k == "window") c.window = v.get<double>();
        else if (k == "max_scale") c.max_scale = v.get<double>();
        else if (k == "density_radii") c.density_radii = v.get<std::vector<double>>();
        else if (k == "density_tol") c.density_tol = v.get<double>();
        else if (k == "neck_dt") c.neck_dt = v.get<double>();
        else if (k == "neck_ntheta") c.neck_ntheta = v.get<int>();
        else if (k == "neck_window") c.neck_window = v.get<double>();
        else if (k == "neck_separation") c.neck_separation = v.get<double>();
        else if (k == "offcenter_ratio") c.offcenter_ratio = v.get<double>();
        else if (k == "convergence_tol") c.convergence_tol = v.get<double>();
        else if (k == "compact_radius") c.compact_radius = v.get<double>();
        else if (k == "depth_cap") c.depth_cap = v.get<int>();
        else if (k == "slice_grid") c.slice_grid = v.get<int>();
        else if (k == "slice_halfwidth") c.slice_halfwidth = v.get<double>();
        else if (k == "slice_maximal") c.slice_maximal = v.get<double>();
        else if (k == "slice_lorentz") c.slice_lorentz = v.get<double>();
        else if (k == "detect_halfwidth") c.detect_halfwidth = v.get<double>();
        else if (k == "detect_spacing") c.detect_spacing = v.get<double>();
        else if (k == "detect_slack") c.detect_slack = v.get<double>();
        else if (k == "mesh") {
            c.mesh.background = v.value("background", c.mesh.background);
            c.mesh.dt = v.value("dt", c.mesh.dt);
            c.mesh.ntheta = v.value("ntheta", c.mesh.ntheta);
            c.mesh.depth = v.value("depth", c.mesh.depth);
        } else if (k == "threads") c.threads = v.get<int>();
        else throw std::invalid_argument("config: unknown key '" + k + "'");
    }
    c.validate();
    return c;
}

inline json to_json(const TreeNode& n) {
    json j;
    j["kind"] = kind_name(n.kind);
    j["key"] = n.key;
    j["center"] = detail::vec(n.center);
    j["scale"] = n.scale;
    if (n.kind == TreeNode::Kind::neck) {
        j["inner"] = n.inner;
        j["l2inf"] = n.l2inf;
    }
    j["energy"] = n.energy;
    if (n.structure) {
        j["structure"] = json::array({n.structure->a, n.structure->b, n.structure->c});
        j["structure_residual"] = n.structure_residual;
    } else {
        j["structure"] = nullptr;
    }
    if (n.kind == TreeNode::Kind::bubble) j["convergence_gap"] = n.convergence_gap;
    j["parent"] = n.parent;
    return j;
}

inline json to_json(const BubbleTree& t) {
    json j;
    j["level"] = t.level;
    j["bubble_count"] = t.bubble_count();
    j["depth"] = t.depth();
    j["sum_energy"] = t.sum_energy();
    j["residual_neck_energy"] = t.residual_neck_energy;
    j["rejected_energy"] = t.rejected_energy;
    j["nodes"] = json::array();
    for (const auto& n : t.nodes) j["nodes"].push_back(to_json(n));
    j["diagnostics"] = t.diagnostics;
    return j;
}

inline json to_json(const QuantizeReport& r) {
    json j;
    j["format"] = kTreeFormat;
    j["theta"] = r.theta;
    j["sum_energy"] = r.sum_energy;
    j["quantization_gap"] = r.quantization_gap();
    j["residual_neck_energy"] = r.residual_neck_energy;
    j["residual_nonincreasing"] = r.residual_nonincreasing;
    j["clusters"] = json::array();
    for (const auto& c : r.clusters)
        j["clusters"].push_back({{"point", detail::vec(c.point)},
                                 {"theta", c.theta.theta},
                                 {"theta_reliable", c.theta.reliable},
                                 {"ratios", c.theta.ratios},
                                 {"sum_energy", c.sum_energy}});
    j["levels"] = json::array();
    for (const auto& t : r.levels) j["levels"].push_back(to_json(t));
    j["diagnostics"] = r.diagnostics;
    return j;
}

}  // namespace fueterlab
