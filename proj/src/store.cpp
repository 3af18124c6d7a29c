#include "obsprobe/store.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace obsprobe::store {

using nlohmann::json;

// ---------------------------------------------------------------------------
// binary16 conversion
// ---------------------------------------------------------------------------

uint16_t f32_to_f16(float value) {
    if (std::isnan(value)) return 0x7e00;
    uint16_t sign = std::signbit(value) ? 0x8000 : 0;
    double a = std::fabs(static_cast<double>(value));
    if (a == 0.0) return sign;
    if (a >= 65520.0) return sign | 0x7c00;  // past the max-finite/inf midpoint
    int e;
    std::frexp(a, &e);
    if (e - 1 < -14) {
        // subnormal range, quantum 2^-24; 1024 carries into the smallest normal
        double q = std::nearbyint(a * 0x1p24);
        return sign | static_cast<uint16_t>(q);
    }
    double mant = std::nearbyint((a * std::ldexp(1.0, -(e - 1)) - 1.0) * 1024.0);
    int he = e - 1 + 15;
    if (mant == 1024.0) {
        mant = 0.0;
        ++he;
        if (he >= 31) return sign | 0x7c00;
    }
    return static_cast<uint16_t>(sign | (he << 10) | static_cast<int>(mant));
}

float f16_to_f32(uint16_t bits) {
    const uint16_t exp = (bits >> 10) & 0x1f;
    const uint16_t mant = bits & 0x3ff;
    double v;
    if (exp == 0) {
        v = std::ldexp(static_cast<double>(mant), -24);
    } else if (exp == 31) {
        v = mant ? std::numeric_limits<double>::quiet_NaN()
                 : std::numeric_limits<double>::infinity();
    } else {
        v = std::ldexp(1.0 + mant / 1024.0, exp - 15);
    }
    float f = static_cast<float>(v);
    return (bits & 0x8000) ? -f : f;
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

namespace {

const char* dtype_name(observer::Dtype d) {
    return d == observer::Dtype::f32 ? "f32" : "f16";
}

size_t dtype_size(observer::Dtype d) { return d == observer::Dtype::f32 ? 4 : 2; }

json spec_json(const std::string& model_id, const observer::CaptureSpec& spec,
               const std::string& hook_point) {
    json j;
    j["model_id"] = model_id;
    j["hook_point"] = hook_point;
    j["layers"] = spec.layers;
    j["attention"] = spec.capture_attention;
    j["head_outputs"] = spec.capture_head_outputs;
    j["mlp_outputs"] = spec.capture_mlp_outputs;
    j["logits"] = spec.capture_logits;
    j["dtype"] = dtype_name(spec.dtype);
    return j;
}

void validate_doc_id(const std::string& id) {
    if (id.empty() || id.size() > 120) {
        throw RuntimeError("store: doc id must be 1..120 chars: '" + id + "'");
    }
    for (char c : id) {
        bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                  c == '.' || c == '_' || c == '-';
        if (!ok) throw RuntimeError("store: doc id has unsafe character: '" + id + "'");
    }
    if (id == "." || id == "..") throw RuntimeError("store: doc id reserved: '" + id + "'");
}

void write_tensor(const fs::path& path, const double* data, size_t n, observer::Dtype dtype) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("store: cannot open for write: " + path.string());
    if (dtype == observer::Dtype::f32) {
        std::vector<float> buf(n);
        for (size_t i = 0; i < n; ++i) buf[i] = static_cast<float>(data[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(n * 4));
    } else {
        std::vector<uint16_t> buf(n);
        for (size_t i = 0; i < n; ++i) buf[i] = f32_to_f16(static_cast<float>(data[i]));
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(n * 2));
    }
    if (!out) throw RuntimeError("store: short write: " + path.string());
}

std::vector<char> read_raw(const fs::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw RuntimeError("store: cannot open: " + path.string());
    auto sz = in.tellg();
    std::vector<char> buf(static_cast<size_t>(sz));
    in.seekg(0);
    in.read(buf.data(), sz);
    if (!in) throw RuntimeError("store: short read: " + path.string());
    return buf;
}

std::vector<double> decode_raw(const std::vector<char>& raw, observer::Dtype dtype) {
    std::vector<double> out;
    if (dtype == observer::Dtype::f32) {
        out.resize(raw.size() / 4);
        const float* p = reinterpret_cast<const float*>(raw.data());
        for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(p[i]);
    } else {
        out.resize(raw.size() / 2);
        const uint16_t* p = reinterpret_cast<const uint16_t*>(raw.data());
        for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(f16_to_f32(p[i]));
    }
    return out;
}

/// Read `count` elements starting at `elem_offset` without loading the file.
std::vector<double> read_slice(const fs::path& path, size_t elem_offset, size_t count,
                               observer::Dtype dtype) {
    const size_t esz = dtype_size(dtype);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeError("store: cannot open: " + path.string());
    in.seekg(static_cast<std::streamoff>(elem_offset * esz));
    std::vector<char> raw(count * esz);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!in) throw RuntimeError("store: short slice read: " + path.string());
    return decode_raw(raw, dtype);
}

Mat to_mat(const std::vector<double>& flat, size_t rows, size_t cols) {
    Mat m(rows, cols);
    std::copy(flat.begin(), flat.end(), m.data());
    return m;
}

}  // namespace

std::string spec_hash(const std::string& model_id, const observer::CaptureSpec& spec,
                      const std::string& hook_point) {
    return sha256_hex(spec_json(model_id, spec, hook_point).dump()).substr(0, 16);
}

ActivationStore::ActivationStore(fs::path root, std::string model_id,
                                 observer::CaptureSpec spec, std::string hook_point)
    : root_(std::move(root)),
      model_id_(std::move(model_id)),
      spec_(std::move(spec)),
      hook_point_(std::move(hook_point)),
      hash_(spec_hash(model_id_, spec_, hook_point_)) {
    const fs::path meta = root_ / "store.json";
    if (fs::exists(meta)) {
        json existing = json::parse(read_text_file(meta));
        if (existing.at("spec_hash").get<std::string>() != hash_) {
            throw ConfigError("store at " + root_.string() +
                              " was created with a different model or capture spec");
        }
    } else {
        fs::create_directories(root_ / "docs");
        json j;
        j["spec"] = spec_json(model_id_, spec_, hook_point_);
        j["spec_hash"] = hash_;
        write_text_file_atomic(meta, j.dump(2));
    }
}

fs::path ActivationStore::doc_dir(const std::string& doc_id) const {
    return root_ / "docs" / doc_id;
}

bool ActivationStore::contains(const std::string& doc_id) const {
    validate_doc_id(doc_id);
    return fs::exists(doc_dir(doc_id) / "manifest.json");
}

std::vector<std::string> ActivationStore::doc_ids() const {
    std::vector<std::string> ids;
    const fs::path index = root_ / "index.jsonl";
    if (!fs::exists(index)) return ids;
    std::istringstream in(read_text_file(index));
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        std::string id = json::parse(line).at("doc_id").get<std::string>();
        if (fs::exists(doc_dir(id) / "manifest.json")) ids.push_back(std::move(id));
    }
    return ids;
}

void ActivationStore::put(const std::string& doc_id, const observer::CapturedActivations& acts,
                          const DocMeta& meta) {
    validate_doc_id(doc_id);
    if (contains(doc_id)) {
        throw RuntimeError("store: doc '" + doc_id + "' already present under spec " + hash_);
    }
    const fs::path dir = doc_dir(doc_id);
    fs::create_directories(dir);

    json tensors = json::object();
    auto emit = [&](const std::string& name, const double* data, std::vector<size_t> shape) {
        size_t n = 1;
        for (size_t s : shape) n *= s;
        const std::string file = name + ".bin";
        write_tensor(dir / file, data, n, spec_.dtype);
        auto raw = read_raw(dir / file);
        json entry;
        entry["file"] = file;
        entry["shape"] = shape;
        entry["fnv64"] = hex64(fnv1a64(raw.data(), raw.size()));
        tensors[name] = entry;
    };

    for (const auto& [k, m] : acts.resid) {
        emit("resid." + std::to_string(k), m.data(),
             {static_cast<size_t>(m.rows()), static_cast<size_t>(m.cols())});
    }
    for (const auto& [b, heads] : acts.attn) {
        // pack per-head maps into one [H, T, T] tensor
        const size_t H = heads.size();
        const size_t T = static_cast<size_t>(heads.empty() ? 0 : heads[0].rows());
        std::vector<double> flat(H * T * T);
        for (size_t h = 0; h < H; ++h) {
            std::copy(heads[h].data(), heads[h].data() + T * T, flat.data() + h * T * T);
        }
        emit("attn." + std::to_string(b), flat.data(), {H, T, T});
    }
    for (const auto& [key, m] : acts.head_out) {
        emit("head_out." + std::to_string(key.first) + "." + std::to_string(key.second), m.data(),
             {static_cast<size_t>(m.rows()), static_cast<size_t>(m.cols())});
    }
    for (const auto& [b, m] : acts.mlp_out) {
        emit("mlp_out." + std::to_string(b), m.data(),
             {static_cast<size_t>(m.rows()), static_cast<size_t>(m.cols())});
    }
    if (acts.logits.size() > 0) {
        emit("logits", acts.logits.data(),
             {static_cast<size_t>(acts.logits.rows()), static_cast<size_t>(acts.logits.cols())});
    }

    json manifest;
    manifest["doc_id"] = doc_id;
    manifest["T"] = acts.T;
    manifest["dtype"] = dtype_name(spec_.dtype);
    manifest["spec_hash"] = hash_;
    manifest["meta"] = meta;
    manifest["tensors"] = tensors;
    write_text_file_atomic(dir / "manifest.json", manifest.dump(2));

    json line;
    line["doc_id"] = doc_id;
    line["T"] = acts.T;
    std::ofstream index(root_ / "index.jsonl", std::ios::app);
    index << line.dump() << "\n";
    if (!index) throw RuntimeError("store: failed to append index at " + root_.string());
}

namespace {

json load_manifest(const fs::path& dir, const std::string& doc_id) {
    const fs::path path = dir / "manifest.json";
    if (!fs::exists(path)) throw RuntimeError("store: doc '" + doc_id + "' not found");
    return json::parse(read_text_file(path));
}

}  // namespace

observer::CapturedActivations ActivationStore::get(const std::string& doc_id) const {
    validate_doc_id(doc_id);
    const fs::path dir = doc_dir(doc_id);
    json manifest = load_manifest(dir, doc_id);
    observer::CapturedActivations acts;
    acts.T = manifest.at("T").get<int>();

    for (const auto& [name, entry] : manifest.at("tensors").items()) {
        auto raw = read_raw(dir / entry.at("file").get<std::string>());
        auto shape = entry.at("shape").get<std::vector<size_t>>();
        size_t n = 1;
        for (size_t s : shape) n *= s;
        if (raw.size() != n * dtype_size(spec_.dtype)) {
            throw RuntimeError("store: size mismatch for " + name + " in doc " + doc_id);
        }
        if (hex64(fnv1a64(raw.data(), raw.size())) != entry.at("fnv64").get<std::string>()) {
            throw RuntimeError("store: checksum mismatch for " + name + " in doc " + doc_id);
        }
        auto flat = decode_raw(raw, spec_.dtype);

        if (starts_with(name, "resid.")) {
            acts.resid[std::stoi(name.substr(6))] = to_mat(flat, shape[0], shape[1]);
        } else if (starts_with(name, "attn.")) {
            const size_t H = shape[0], T = shape[1];
            auto& heads = acts.attn[std::stoi(name.substr(5))];
            heads.resize(H);
            for (size_t h = 0; h < H; ++h) {
                heads[h] = Mat(T, T);
                std::copy(flat.data() + h * T * T, flat.data() + (h + 1) * T * T,
                          heads[h].data());
            }
        } else if (starts_with(name, "head_out.")) {
            auto rest = name.substr(9);
            auto dot = rest.find('.');
            int b = std::stoi(rest.substr(0, dot));
            int h = std::stoi(rest.substr(dot + 1));
            acts.head_out[{b, h}] = to_mat(flat, shape[0], shape[1]);
        } else if (starts_with(name, "mlp_out.")) {
            acts.mlp_out[std::stoi(name.substr(8))] = to_mat(flat, shape[0], shape[1]);
        } else if (name == "logits") {
            acts.logits = to_mat(flat, shape[0], shape[1]);
        } else {
            throw RuntimeError("store: unknown tensor name '" + name + "' in doc " + doc_id);
        }
    }
    return acts;
}

Eigen::VectorXd ActivationStore::resid_row(const std::string& doc_id, int layer,
                                           int token) const {
    validate_doc_id(doc_id);
    const fs::path dir = doc_dir(doc_id);
    json manifest = load_manifest(dir, doc_id);
    const std::string name = "resid." + std::to_string(layer);
    if (!manifest.at("tensors").contains(name)) {
        throw RuntimeError("store: doc '" + doc_id + "' has no stream " + std::to_string(layer));
    }
    const json& entry = manifest["tensors"][name];
    auto shape = entry.at("shape").get<std::vector<size_t>>();
    const size_t T = shape[0], d = shape[1];
    if (token < 0 || static_cast<size_t>(token) >= T) {
        throw RuntimeError("store: token " + std::to_string(token) + " out of range for doc '" +
                           doc_id + "'");
    }
    const fs::path file = dir / entry.at("file").get<std::string>();
    if (fs::file_size(file) != T * d * dtype_size(spec_.dtype)) {
        throw RuntimeError("store: size mismatch for " + name + " in doc " + doc_id);
    }
    auto flat = read_slice(file, static_cast<size_t>(token) * d, d, spec_.dtype);
    return Eigen::Map<Eigen::VectorXd>(flat.data(), static_cast<Eigen::Index>(d));
}

Mat ActivationStore::resid(const std::string& doc_id, int layer) const {
    validate_doc_id(doc_id);
    const fs::path dir = doc_dir(doc_id);
    json manifest = load_manifest(dir, doc_id);
    const std::string name = "resid." + std::to_string(layer);
    if (!manifest.at("tensors").contains(name)) {
        throw RuntimeError("store: doc '" + doc_id + "' has no stream " + std::to_string(layer));
    }
    const json& entry = manifest["tensors"][name];
    auto shape = entry.at("shape").get<std::vector<size_t>>();
    auto flat = read_slice(dir / entry.at("file").get<std::string>(), 0, shape[0] * shape[1],
                           spec_.dtype);
    return to_mat(flat, shape[0], shape[1]);
}

int ActivationStore::doc_T(const std::string& doc_id) const {
    validate_doc_id(doc_id);
    return load_manifest(doc_dir(doc_id), doc_id).at("T").get<int>();
}

DocMeta ActivationStore::doc_meta(const std::string& doc_id) const {
    validate_doc_id(doc_id);
    json manifest = load_manifest(doc_dir(doc_id), doc_id);
    DocMeta meta;
    if (manifest.contains("meta")) {
        for (const auto& [k, v] : manifest["meta"].items()) meta[k] = v.get<int>();
    }
    return meta;
}

}  // namespace obsprobe::store
