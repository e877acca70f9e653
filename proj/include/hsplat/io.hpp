#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <png.h>

#include <json.hpp>

#include "image.hpp"
#include "math.hpp"
#include "model.hpp"
#include "refine.hpp"
#include "scene.hpp"

// On-disk formats: 3DGS point-attribute files (binary PLY), the hierarchy
// binary, camera and camera-path text, planar f32 dumps, SfM point sets,
// scene manifests, PNG output, and the tool config file.
namespace hsplat {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian and read/written natively");

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), Errc::IoFailure, "cannot open " + path);
    f.seekg(0, std::ios::end);
    std::vector<unsigned char> bytes(static_cast<std::size_t>(f.tellg()));
    f.seekg(0);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(f.good() || bytes.empty(), Errc::IoFailure, "cannot read " + path);
    return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), Errc::IoFailure, "cannot open " + path + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    require(f.good(), Errc::IoFailure, "cannot write " + path);
}

template <class T>
void put_pod(std::string& s, T v) {
    s.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

// Bounds-checked cursor over a byte buffer.
struct ByteReader {
    const unsigned char* p;
    std::size_t left;

    template <class T>
    T get() {
        require(left >= sizeof(T), Errc::TruncatedRecord, "file ends mid-record");
        T v;
        std::memcpy(&v, p, sizeof(T));
        p += sizeof(T);
        left -= sizeof(T);
        return v;
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// 3DGS point-attribute files (binary little-endian PLY).
//
// Stored pre-activation: opacity as a logit, scale in log space, rotation as
// raw wxyz coefficients. Properties this library does not interpret are kept
// so a read-modify-write pass preserves them, along with the original
// property order.
// ---------------------------------------------------------------------------

struct SplatFile {
    std::vector<Gaussian> gaussians;
    std::vector<std::string> layout;                // property order as in the file
    std::vector<std::string> extra_names;           // uninterpreted properties, layout order
    std::vector<std::vector<float>> extra_values;   // [extra][point]
};

// Canonical degree-3 property order for freshly written files.
inline std::vector<std::string> canonical_splat_layout() {
    std::vector<std::string> v{"x", "y", "z"};
    for (int c = 0; c < 3; ++c) v.push_back("f_dc_" + std::to_string(c));
    for (int j = 0; j < 45; ++j) v.push_back("f_rest_" + std::to_string(j));
    v.push_back("opacity");
    for (int a = 0; a < 3; ++a) v.push_back("scale_" + std::to_string(a));
    for (int r = 0; r < 4; ++r) v.push_back("rot_" + std::to_string(r));
    return v;
}

namespace detail {

// -1 unless `name` is `prefix` followed by a plain decimal index.
inline int suffix_index(const std::string& name, std::string_view prefix) {
    if (name.size() <= prefix.size() || name.compare(0, prefix.size(), prefix) != 0) return -1;
    int v = 0;
    for (std::size_t i = prefix.size(); i < name.size(); ++i) {
        if (name[i] < '0' || name[i] > '9') return -1;
        v = v * 10 + (name[i] - '0');
    }
    return v;
}

enum class SplatField { X, Y, Z, Dc, Rest, Opacity, Scale, Rot, Extra };

struct SplatPlan {
    std::vector<std::pair<SplatField, int>> fields;  // one per property
    int rest_fields = 0;
    std::vector<std::string> extra_names;
};

// Map property names to the attributes they carry. Degree validity is the
// caller's job: record-size errors must win over an odd SH layout.
inline SplatPlan classify_splat_props(const std::vector<std::string>& props) {
    SplatPlan plan;
    plan.fields.reserve(props.size());
    std::set<std::string> seen;
    std::set<int> rest;
    bool has[14] = {};  // x y z dc0 dc1 dc2 op s0 s1 s2 r0 r1 r2 r3

    for (const std::string& name : props) {
        require(seen.insert(name).second, Errc::MalformedHeader,
                "duplicate property " + name);
        int idx;
        if (name == "x" || name == "y" || name == "z") {
            const int axis = name[0] - 'x';
            has[axis] = true;
            plan.fields.emplace_back(static_cast<SplatField>(axis), 0);
        } else if ((idx = suffix_index(name, "f_dc_")) >= 0 && idx < 3) {
            has[3 + idx] = true;
            plan.fields.emplace_back(SplatField::Dc, idx);
        } else if ((idx = suffix_index(name, "f_rest_")) >= 0) {
            rest.insert(idx);
            plan.fields.emplace_back(SplatField::Rest, idx);
        } else if (name == "opacity") {
            has[6] = true;
            plan.fields.emplace_back(SplatField::Opacity, 0);
        } else if ((idx = suffix_index(name, "scale_")) >= 0 && idx < 3) {
            has[7 + idx] = true;
            plan.fields.emplace_back(SplatField::Scale, idx);
        } else if ((idx = suffix_index(name, "rot_")) >= 0 && idx < 4) {
            has[10 + idx] = true;
            plan.fields.emplace_back(SplatField::Rot, idx);
        } else {
            plan.fields.emplace_back(SplatField::Extra,
                                     static_cast<int>(plan.extra_names.size()));
            plan.extra_names.push_back(name);
        }
    }
    for (bool h : has)
        require(h, Errc::MalformedHeader, "missing a required point attribute");
    plan.rest_fields = static_cast<int>(rest.size());
    for (int j = 0; j < plan.rest_fields; ++j)
        require(rest.count(j) == 1, Errc::MalformedHeader, "gap in f_rest indices");
    return plan;
}

inline void check_sh_rest_count(int rest) {
    require(rest == 0 || rest == 9 || rest == 24 || rest == 45, Errc::UnsupportedShDegree,
            "f_rest field count implies an unsupported SH degree");
}

struct PlyHeader {
    std::size_t count = 0;
    std::vector<std::string> props;
    std::size_t data_offset = 0;
};

inline PlyHeader parse_ply_header(const std::vector<unsigned char>& bytes) {
    const std::string_view view(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    constexpr std::string_view end_tag = "end_header\n";
    const std::size_t end = view.find(end_tag);
    require(end != std::string_view::npos, Errc::MalformedHeader, "missing end_header");

    PlyHeader hdr;
    hdr.data_offset = end + end_tag.size();
    std::istringstream in{std::string(view.substr(0, end))};
    std::string line;
    bool first = true, saw_format = false, saw_vertex = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (first) {
            require(tok == "ply", Errc::MalformedHeader, "not a point-attribute file");
            first = false;
            continue;
        }
        if (tok.empty() || tok == "comment" || tok == "obj_info") continue;
        if (tok == "format") {
            std::string fmt, ver;
            ls >> fmt >> ver;
            require(fmt == "binary_little_endian" && ver == "1.0", Errc::MalformedHeader,
                    "only binary little-endian 1.0 is supported");
            saw_format = true;
        } else if (tok == "element") {
            std::string name;
            std::uint64_t n = 0;
            ls >> name >> n;
            require(!ls.fail() && name == "vertex" && !saw_vertex, Errc::MalformedHeader,
                    "expected a single vertex element");
            hdr.count = n;
            saw_vertex = true;
        } else if (tok == "property") {
            std::string type, name;
            ls >> type >> name;
            require(!ls.fail() && (type == "float" || type == "float32") && saw_vertex,
                    Errc::MalformedHeader, "only float vertex properties are supported");
            hdr.props.push_back(name);
        } else {
            fail(Errc::MalformedHeader, "unrecognized header line: " + line);
        }
    }
    require(!first && saw_format && saw_vertex && !hdr.props.empty(), Errc::MalformedHeader,
            "incomplete header");
    return hdr;
}

}  // namespace detail

inline SplatFile read_splats(const std::string& path) {
    const auto bytes = detail::read_file(path);
    const auto hdr = detail::parse_ply_header(bytes);
    const std::size_t stride = hdr.props.size() * sizeof(float);
    require(bytes.size() - hdr.data_offset == hdr.count * stride, Errc::TruncatedRecord,
            "vertex data size does not match the declared layout");

    const auto plan = detail::classify_splat_props(hdr.props);
    detail::check_sh_rest_count(plan.rest_fields);
    const int per_channel = plan.rest_fields / 3;

    SplatFile out;
    out.layout = hdr.props;
    out.extra_names = plan.extra_names;
    out.extra_values.resize(plan.extra_names.size());
    for (auto& v : out.extra_values) v.reserve(hdr.count);
    out.gaussians.reserve(hdr.count);

    std::vector<float> rec(hdr.props.size());
    for (std::size_t i = 0; i < hdr.count; ++i) {
        std::memcpy(rec.data(), bytes.data() + hdr.data_offset + i * stride, stride);
        Gaussian g;
        Vec4f q = Vec4f::Zero();
        for (std::size_t p = 0; p < plan.fields.size(); ++p) {
            const auto [field, aux] = plan.fields[p];
            const float v = rec[p];
            switch (field) {
                case detail::SplatField::X: g.mean.x() = v; break;
                case detail::SplatField::Y: g.mean.y() = v; break;
                case detail::SplatField::Z: g.mean.z() = v; break;
                case detail::SplatField::Dc: g.sh_at(0, aux) = v; break;
                case detail::SplatField::Rest:
                    g.sh_at(1 + aux % per_channel, aux / per_channel) = v;
                    break;
                case detail::SplatField::Opacity: g.falloff = sigmoid(v); break;
                case detail::SplatField::Scale: g.scale[aux] = std::exp(v); break;
                case detail::SplatField::Rot: q[aux] = v; break;
                case detail::SplatField::Extra: out.extra_values[aux].push_back(v); break;
            }
        }
        const float qn = q.norm();
        g.rotation = qn > 0.0f ? Quatf(q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn)
                               : Quatf::Identity();
        validate_gaussian(g);
        out.gaussians.push_back(g);
    }
    return out;
}

inline void write_splats(const std::string& path, const SplatFile& file) {
    const auto plan = detail::classify_splat_props(file.layout);
    detail::check_sh_rest_count(plan.rest_fields);
    const int per_channel = plan.rest_fields / 3;
    require(plan.extra_names == file.extra_names, Errc::InvalidArgument,
            "extra columns must match the uninterpreted layout properties");
    for (const auto& col : file.extra_values)
        require(col.size() == file.gaussians.size(), Errc::InvalidArgument,
                "every extra column needs one value per point");
    for (const Gaussian& g : file.gaussians)
        require(g.falloff >= 0.0f && g.falloff <= 1.0f, Errc::InvalidArgument,
                "point files store opacity as a logit; falloff must be in [0, 1]");

    std::string buf;
    buf.reserve(128 + file.gaussians.size() * file.layout.size() * sizeof(float));
    buf += "ply\nformat binary_little_endian 1.0\nelement vertex " +
           std::to_string(file.gaussians.size()) + "\n";
    for (const std::string& name : file.layout) buf += "property float " + name + "\n";
    buf += "end_header\n";

    for (std::size_t i = 0; i < file.gaussians.size(); ++i) {
        const Gaussian& g = file.gaussians[i];
        for (std::size_t p = 0; p < plan.fields.size(); ++p) {
            const auto [field, aux] = plan.fields[p];
            float v = 0.0f;
            switch (field) {
                case detail::SplatField::X: v = g.mean.x(); break;
                case detail::SplatField::Y: v = g.mean.y(); break;
                case detail::SplatField::Z: v = g.mean.z(); break;
                case detail::SplatField::Dc: v = g.sh_at(0, aux); break;
                case detail::SplatField::Rest:
                    v = g.sh_at(1 + aux % per_channel, aux / per_channel);
                    break;
                case detail::SplatField::Opacity: v = logit(g.falloff); break;
                case detail::SplatField::Scale: v = std::log(g.scale[aux]); break;
                case detail::SplatField::Rot:
                    v = aux == 0 ? g.rotation.w()
                        : aux == 1 ? g.rotation.x()
                        : aux == 2 ? g.rotation.y()
                                   : g.rotation.z();
                    break;
                case detail::SplatField::Extra: v = file.extra_values[aux][i]; break;
            }
            detail::put_pod(buf, v);
        }
    }
    detail::write_file(path, buf);
}

inline void write_splats(const std::string& path, std::span<const Gaussian> gaussians) {
    SplatFile file;
    file.gaussians.assign(gaussians.begin(), gaussians.end());
    file.layout = canonical_splat_layout();
    write_splats(path, file);
}

// ---------------------------------------------------------------------------
// Hierarchy binary: magic "H3DG", version u32, node count u64, SH degree u32,
// then 272 bytes per node (parent u32, first-child u32, child-count u32,
// AABB 6f, mean 3f, scale 3f, rotation wxyz 4f, falloff f, SH 48f).
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kHierarchyVersion = 1;

inline void write_hierarchy(const std::string& path, const Hierarchy& h) {
    std::string buf;
    buf.reserve(20 + h.nodes.size() * 272);
    buf += "H3DG";
    detail::put_pod(buf, kHierarchyVersion);
    detail::put_pod(buf, static_cast<std::uint64_t>(h.nodes.size()));
    detail::put_pod(buf, h.sh_degree);
    for (const HierarchyNode& n : h.nodes) {
        detail::put_pod(buf, n.parent);
        detail::put_pod(buf, n.first_child);
        detail::put_pod(buf, n.child_count);
        for (int a = 0; a < 3; ++a) detail::put_pod(buf, n.bounds.min[a]);
        for (int a = 0; a < 3; ++a) detail::put_pod(buf, n.bounds.max[a]);
        for (int a = 0; a < 3; ++a) detail::put_pod(buf, n.g.mean[a]);
        for (int a = 0; a < 3; ++a) detail::put_pod(buf, n.g.scale[a]);
        detail::put_pod(buf, n.g.rotation.w());
        detail::put_pod(buf, n.g.rotation.x());
        detail::put_pod(buf, n.g.rotation.y());
        detail::put_pod(buf, n.g.rotation.z());
        detail::put_pod(buf, n.g.falloff);
        for (float v : n.g.sh) detail::put_pod(buf, v);
    }
    detail::write_file(path, buf);
}

inline Hierarchy read_hierarchy(const std::string& path) {
    const auto bytes = detail::read_file(path);
    require(bytes.size() >= 20 && std::memcmp(bytes.data(), "H3DG", 4) == 0,
            Errc::MalformedHeader, "not a hierarchy file");
    detail::ByteReader r{bytes.data() + 4, bytes.size() - 4};
    const auto version = r.get<std::uint32_t>();
    require(version == kHierarchyVersion, Errc::MalformedHeader,
            "unsupported hierarchy version");
    const auto count = r.get<std::uint64_t>();
    const auto degree = r.get<std::uint32_t>();
    require(r.left == count * 272, Errc::TruncatedRecord,
            "node data size does not match the header count");
    require(degree <= 3, Errc::UnsupportedShDegree, "SH degree above 3 is not supported");

    Hierarchy h;
    h.sh_degree = degree;
    h.nodes.resize(count);
    for (HierarchyNode& n : h.nodes) {
        n.parent = r.get<std::uint32_t>();
        n.first_child = r.get<std::uint32_t>();
        n.child_count = r.get<std::uint32_t>();
        for (int a = 0; a < 3; ++a) n.bounds.min[a] = r.get<float>();
        for (int a = 0; a < 3; ++a) n.bounds.max[a] = r.get<float>();
        for (int a = 0; a < 3; ++a) n.g.mean[a] = r.get<float>();
        for (int a = 0; a < 3; ++a) n.g.scale[a] = r.get<float>();
        const float w = r.get<float>(), x = r.get<float>(), y = r.get<float>(),
                    z = r.get<float>();
        n.g.rotation = Quatf(w, x, y, z);
        n.g.falloff = r.get<float>();
        for (float& v : n.g.sh) v = r.get<float>();
    }
    validate_hierarchy(h);
    return h;
}

// ---------------------------------------------------------------------------
// Camera text: one camera per line, `width height fx fy cx cy` followed by
// the world-to-camera 3x4 matrix as 12 floats row-major. '#' starts a
// comment. Camera paths prepend a strictly increasing timestamp.
// ---------------------------------------------------------------------------

struct CameraPath {
    std::vector<double> timestamps;
    std::vector<CameraModel> cameras;
};

namespace detail {

inline void put_camera(std::ostream& os, const CameraModel& c) {
    os << c.width << ' ' << c.height << ' ' << c.focal.x() << ' ' << c.focal.y() << ' '
       << c.principal.x() << ' ' << c.principal.y();
    for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 4; ++col) os << ' ' << c.world_to_camera(r, col);
    os << '\n';
}

inline CameraModel get_camera(std::istringstream& ls, const std::string& line) {
    CameraModel c;
    ls >> c.width >> c.height >> c.focal.x() >> c.focal.y() >> c.principal.x() >>
        c.principal.y();
    for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 4; ++col) ls >> c.world_to_camera(r, col);
    std::string trailing;
    require(!ls.fail() && !(ls >> trailing), Errc::MalformedHeader,
            "expected 18 numbers per camera: " + line);
    validate_camera(c);
    return c;
}

// Non-empty, non-comment lines.
inline std::vector<std::string> data_lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::size_t ns = line.find_first_not_of(" \t");
        if (ns == std::string::npos || line[ns] == '#') continue;
        out.push_back(line);
    }
    return out;
}

inline std::string file_text(const std::string& path) {
    const auto bytes = read_file(path);
    return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

}  // namespace detail

inline void write_cameras(const std::string& path, std::span<const CameraModel> cams) {
    std::ostringstream os;
    os << std::setprecision(9);
    os << "# width height fx fy cx cy  world-to-camera 3x4 row-major\n";
    for (const CameraModel& c : cams) detail::put_camera(os, c);
    detail::write_file(path, os.str());
}

inline std::vector<CameraModel> read_cameras(const std::string& path) {
    std::vector<CameraModel> cams;
    for (const std::string& line : detail::data_lines(detail::file_text(path))) {
        std::istringstream ls(line);
        cams.push_back(detail::get_camera(ls, line));
    }
    return cams;
}

inline void write_camera_path(const std::string& path, const CameraPath& cp) {
    require(cp.timestamps.size() == cp.cameras.size(), Errc::DimensionMismatch,
            "one timestamp per camera");
    for (std::size_t i = 1; i < cp.timestamps.size(); ++i)
        require(cp.timestamps[i] > cp.timestamps[i - 1], Errc::InvalidArgument,
                "timestamps must be strictly increasing");
    std::ostringstream os;
    os << std::setprecision(17);
    os << "# timestamp  width height fx fy cx cy  world-to-camera 3x4 row-major\n";
    for (std::size_t i = 0; i < cp.cameras.size(); ++i) {
        os << cp.timestamps[i] << ' ';
        detail::put_camera(os, cp.cameras[i]);
    }
    detail::write_file(path, os.str());
}

inline CameraPath read_camera_path(const std::string& path) {
    CameraPath cp;
    for (const std::string& line : detail::data_lines(detail::file_text(path))) {
        std::istringstream ls(line);
        double t;
        ls >> t;
        require(!ls.fail(), Errc::MalformedHeader, "expected a leading timestamp: " + line);
        cp.cameras.push_back(detail::get_camera(ls, line));
        require(cp.timestamps.empty() || t > cp.timestamps.back(), Errc::InvalidArgument,
                "timestamps must be strictly increasing");
        cp.timestamps.push_back(t);
    }
    return cp;
}

// ---------------------------------------------------------------------------
// Planar f32 dumps. Depth maps carry (width u32, height u32) then one plane;
// general images add a channel count to the header.
// ---------------------------------------------------------------------------

inline void write_depth(const std::string& path, const Image<float>& img) {
    require(img.channels == 1, Errc::InvalidArgument, "depth maps have one channel");
    std::string buf;
    buf.reserve(8 + img.data.size() * sizeof(float));
    detail::put_pod(buf, static_cast<std::uint32_t>(img.width));
    detail::put_pod(buf, static_cast<std::uint32_t>(img.height));
    for (float v : img.data) detail::put_pod(buf, v);
    detail::write_file(path, buf);
}

inline Image<float> read_depth(const std::string& path) {
    const auto bytes = detail::read_file(path);
    require(bytes.size() >= 8, Errc::MalformedHeader, "depth header is two u32 fields");
    detail::ByteReader r{bytes.data(), bytes.size()};
    const auto w = r.get<std::uint32_t>();
    const auto h = r.get<std::uint32_t>();
    require(w > 0 && h > 0, Errc::MalformedHeader, "depth map must be non-empty");
    require(r.left == std::size_t(w) * h * sizeof(float), Errc::TruncatedRecord,
            "depth data size does not match the header");
    Image<float> img(static_cast<int>(w), static_cast<int>(h), 1);
    for (float& v : img.data) v = r.get<float>();
    return img;
}

inline void write_image_f32(const std::string& path, const Image<float>& img) {
    require(img.width > 0 && img.height > 0 && img.channels > 0, Errc::InvalidArgument,
            "image must be non-empty");
    std::string buf;
    buf.reserve(12 + img.data.size() * sizeof(float));
    detail::put_pod(buf, static_cast<std::uint32_t>(img.width));
    detail::put_pod(buf, static_cast<std::uint32_t>(img.height));
    detail::put_pod(buf, static_cast<std::uint32_t>(img.channels));
    for (float v : img.data) detail::put_pod(buf, v);
    detail::write_file(path, buf);
}

inline Image<float> read_image_f32(const std::string& path) {
    const auto bytes = detail::read_file(path);
    require(bytes.size() >= 12, Errc::MalformedHeader, "image header is three u32 fields");
    detail::ByteReader r{bytes.data(), bytes.size()};
    const auto w = r.get<std::uint32_t>();
    const auto h = r.get<std::uint32_t>();
    const auto c = r.get<std::uint32_t>();
    require(w > 0 && h > 0 && c > 0, Errc::MalformedHeader, "image must be non-empty");
    require(r.left == std::size_t(w) * h * c * sizeof(float), Errc::TruncatedRecord,
            "image data size does not match the header");
    Image<float> img(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
    for (float& v : img.data) v = r.get<float>();
    return img;
}

// ---------------------------------------------------------------------------
// SfM point sets, textual: a positions block then per-image observation
// blocks (point index, pixel, inverse depth, reprojection error).
// ---------------------------------------------------------------------------

inline void write_sfm(const std::string& path, const SfmPointSet& sfm) {
    std::ostringstream os;
    os << std::setprecision(9);
    os << "points " << sfm.positions.size() << '\n';
    for (const Vec3f& p : sfm.positions)
        os << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
    for (const auto& [cam, obs] : sfm.per_image) {
        os << "image " << cam << ' ' << obs.size() << '\n';
        for (const SfmObservation& o : obs)
            os << o.point << ' ' << o.pixel.x() << ' ' << o.pixel.y() << ' ' << o.inv_depth
               << ' ' << o.reproj_error << '\n';
    }
    detail::write_file(path, os.str());
}

inline SfmPointSet read_sfm(const std::string& path) {
    const auto lines = detail::data_lines(detail::file_text(path));
    std::size_t li = 0;
    const auto next = [&]() -> const std::string& {
        require(li < lines.size(), Errc::TruncatedRecord, "point set ends mid-block");
        return lines[li++];
    };

    SfmPointSet sfm;
    std::istringstream head(next());
    std::string tag;
    std::size_t n = 0;
    head >> tag >> n;
    require(!head.fail() && tag == "points", Errc::MalformedHeader,
            "point set must start with a points block");
    sfm.positions.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::istringstream ls(next());
        Vec3f p;
        ls >> p.x() >> p.y() >> p.z();
        require(!ls.fail(), Errc::MalformedHeader, "expected 3 coordinates per point");
        sfm.positions.push_back(p);
    }
    while (li < lines.size()) {
        std::istringstream ls(next());
        int cam = 0;
        std::size_t m = 0;
        ls >> tag >> cam >> m;
        require(!ls.fail() && tag == "image", Errc::MalformedHeader,
                "expected an image block");
        auto& obs = sfm.per_image[cam];
        for (std::size_t i = 0; i < m; ++i) {
            std::istringstream ol(next());
            SfmObservation o;
            ol >> o.point >> o.pixel.x() >> o.pixel.y() >> o.inv_depth >> o.reproj_error;
            require(!ol.fail(), Errc::MalformedHeader, "expected 5 fields per observation");
            require(o.point < sfm.positions.size(), Errc::MalformedHeader,
                    "observation refers to a missing point");
            obs.push_back(o);
        }
    }
    return sfm;
}

// ---------------------------------------------------------------------------
// Scene manifest, textual. Paths may not contain whitespace; "-" stands for
// an unset path.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string path_or_dash(const std::string& s) { return s.empty() ? "-" : s; }
inline std::string dash_to_path(const std::string& s) { return s == "-" ? "" : s; }

}  // namespace detail

inline void write_manifest(const std::string& path, const SceneManifest& m) {
    require(m.chunk_files.size() == m.chunks.size(), Errc::DimensionMismatch,
            "one file entry per chunk");
    std::ostringstream os;
    os << std::setprecision(9);
    os << "# scene manifest\n";
    os << "chunk_size " << m.chunk_size << '\n';
    os << "scaffold " << detail::path_or_dash(m.scaffold_file) << '\n';
    os << "skybox " << detail::path_or_dash(m.skybox_file) << '\n';
    for (std::size_t i = 0; i < m.chunks.size(); ++i) {
        const ChunkSpec& c = m.chunks[i];
        os << "chunk " << c.grid_coord.x() << ' ' << c.grid_coord.y() << ' '
           << detail::path_or_dash(m.chunk_files[i]) << '\n';
        os << "bounds " << c.bounds.min.x() << ' ' << c.bounds.min.y() << ' '
           << c.bounds.min.z() << ' ' << c.bounds.max.x() << ' ' << c.bounds.max.y() << ' '
           << c.bounds.max.z() << '\n';
        os << "cameras";
        for (int id : c.camera_ids) os << ' ' << id;
        os << '\n';
        os << "points";
        for (std::uint32_t id : c.sfm_point_ids) os << ' ' << id;
        os << '\n';
    }
    detail::write_file(path, os.str());
}

inline SceneManifest read_manifest(const std::string& path) {
    SceneManifest m;
    bool saw_size = false;
    for (const std::string& line : detail::data_lines(detail::file_text(path))) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "chunk_size") {
            ls >> m.chunk_size;
            require(!ls.fail() && m.chunk_size > 0.0f, Errc::MalformedHeader,
                    "chunk_size must be a positive number");
            saw_size = true;
        } else if (tag == "scaffold") {
            std::string p;
            ls >> p;
            require(!ls.fail(), Errc::MalformedHeader, "scaffold needs a path");
            m.scaffold_file = detail::dash_to_path(p);
        } else if (tag == "skybox") {
            std::string p;
            ls >> p;
            require(!ls.fail(), Errc::MalformedHeader, "skybox needs a path");
            m.skybox_file = detail::dash_to_path(p);
        } else if (tag == "chunk") {
            ChunkSpec c;
            std::string p;
            ls >> c.grid_coord.x() >> c.grid_coord.y() >> p;
            require(!ls.fail(), Errc::MalformedHeader, "chunk needs grid coordinates and a path");
            m.chunks.push_back(std::move(c));
            m.chunk_files.push_back(detail::dash_to_path(p));
        } else if (tag == "bounds") {
            require(!m.chunks.empty(), Errc::MalformedHeader, "bounds outside a chunk block");
            Aabb& b = m.chunks.back().bounds;
            ls >> b.min.x() >> b.min.y() >> b.min.z() >> b.max.x() >> b.max.y() >> b.max.z();
            require(!ls.fail() && b.valid(), Errc::MalformedHeader,
                    "bounds need 6 numbers, min before max");
        } else if (tag == "cameras") {
            require(!m.chunks.empty(), Errc::MalformedHeader, "cameras outside a chunk block");
            int id;
            while (ls >> id) m.chunks.back().camera_ids.push_back(id);
        } else if (tag == "points") {
            require(!m.chunks.empty(), Errc::MalformedHeader, "points outside a chunk block");
            std::uint32_t id;
            while (ls >> id) m.chunks.back().sfm_point_ids.push_back(id);
        } else {
            fail(Errc::MalformedHeader, "unrecognized manifest line: " + line);
        }
    }
    require(saw_size, Errc::MalformedHeader, "manifest is missing chunk_size");
    return m;
}

// ---------------------------------------------------------------------------
// PNG output (8-bit, [0,1] clamp) and input (always decoded to 3-channel
// float RGB).
// ---------------------------------------------------------------------------

inline void write_png(const std::string& path, const Image<float>& img) {
    require(img.channels == 1 || img.channels == 3, Errc::InvalidArgument,
            "PNG output supports 1 or 3 channels");
    require(img.width > 0 && img.height > 0, Errc::InvalidArgument, "image must be non-empty");

    std::FILE* fp = std::fopen(path.c_str(), "wb");
    require(fp != nullptr, Errc::IoFailure, "cannot open " + path + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * img.channels);
    bool ok = info != nullptr;
    if (ok && setjmp(png_jmpbuf(png)) == 0) {
        png_init_io(png, fp);
        png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                     static_cast<png_uint_32>(img.height), 8,
                     img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < img.channels; ++c) {
                    const float v = clamp01(img.at(x, y, c));
                    row[static_cast<std::size_t>(x) * img.channels + c] =
                        static_cast<unsigned char>(std::lround(v * 255.0f));
                }
            png_write_row(png, row.data());
        }
        png_write_end(png, nullptr);
    } else {
        ok = false;
    }
    png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    require(ok, Errc::IoFailure, "PNG encode failed for " + path);
}

inline Image<float> read_png(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    require(fp != nullptr, Errc::IoFailure, "cannot open " + path);

    unsigned char sig[8] = {};
    const std::size_t got = std::fread(sig, 1, 8, fp);
    if (got != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        std::fclose(fp);
        fail(Errc::MalformedHeader, path + " is not a PNG file");
    }

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    std::vector<unsigned char> data;
    std::vector<png_bytep> rows;
    png_uint_32 w = 0, h = 0;
    std::size_t rowbytes = 0;
    bool ok = info != nullptr;
    if (ok && setjmp(png_jmpbuf(png)) == 0) {
        png_init_io(png, fp);
        png_set_sig_bytes(png, 8);
        png_read_info(png, info);
        w = png_get_image_width(png, info);
        h = png_get_image_height(png, info);
        png_set_expand(png);
        png_set_strip_16(png);
        png_set_strip_alpha(png);
        const int color = png_get_color_type(png, info);
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
            png_set_gray_to_rgb(png);
        png_read_update_info(png, info);
        rowbytes = png_get_rowbytes(png, info);
        data.resize(rowbytes * h);
        rows.resize(h);
        for (png_uint_32 y = 0; y < h; ++y) rows[y] = data.data() + y * rowbytes;
        png_read_image(png, rows.data());
    } else {
        ok = false;
    }
    png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    require(ok && w > 0 && h > 0 && rowbytes == std::size_t(w) * 3, Errc::IoFailure,
            "PNG decode failed for " + path);

    Image<float> img(static_cast<int>(w), static_cast<int>(h), 3);
    for (png_uint_32 y = 0; y < h; ++y)
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(static_cast<int>(x), static_cast<int>(y), c) =
                    data[y * rowbytes + std::size_t(x) * 3 + c] / 255.0f;
    return img;
}

// ---------------------------------------------------------------------------
// Tool config: JSON with "build" and "refine" sections mirroring the config
// structs field for field. Unknown keys are rejected to catch typos.
// ---------------------------------------------------------------------------

struct ToolConfig {
    BuildConfig build;
    RefineConfig refine;
};

inline ToolConfig parse_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        fail(Errc::MalformedHeader, std::string("config is not valid JSON: ") + e.what());
    }
    require(j.is_object(), Errc::MalformedHeader, "config must be a JSON object");

    ToolConfig cfg;
    for (const auto& [section, body] : j.items()) {
        require(section == "build" || section == "refine", Errc::InvalidArgument,
                "unknown config section: " + section);
        require(body.is_object(), Errc::MalformedHeader, "config sections must be objects");
        for (const auto& [key, value] : body.items()) {
            try {
                if (section == "build") {
                    if (key == "sigma_extent") cfg.build.sigma_extent = value.get<float>();
                    else fail(Errc::InvalidArgument, "unknown build key: " + key);
                } else {
                    if (key == "tau_min") cfg.refine.tau_min = value.get<float>();
                    else if (key == "tau_max") cfg.refine.tau_max = value.get<float>();
                    else if (key == "steps") cfg.refine.steps = value.get<int>();
                    else if (key == "lr_mean") cfg.refine.lr_mean = value.get<float>();
                    else if (key == "lr_scale") cfg.refine.lr_scale = value.get<float>();
                    else if (key == "lr_rotation") cfg.refine.lr_rotation = value.get<float>();
                    else if (key == "lr_falloff") cfg.refine.lr_falloff = value.get<float>();
                    else if (key == "lr_sh") cfg.refine.lr_sh = value.get<float>();
                    else if (key == "rng_seed") cfg.refine.rng_seed = value.get<std::uint64_t>();
                    else fail(Errc::InvalidArgument, "unknown refine key: " + key);
                }
            } catch (const nlohmann::json::exception&) {
                fail(Errc::MalformedHeader, "config key has the wrong type: " + key);
            }
        }
    }
    require(cfg.build.sigma_extent > 0.0f, Errc::InvalidArgument,
            "sigma_extent must be positive");
    validate_refine_config(cfg.refine);
    return cfg;
}

inline ToolConfig load_config(const std::string& path) {
    return parse_config_text(detail::file_text(path));
}

}  // namespace hsplat
