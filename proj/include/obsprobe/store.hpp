#pragma once

#include <map>
#include <string>
#include <vector>

#include "obsprobe/observer.hpp"
#include "obsprobe/util.hpp"

namespace obsprobe::store {

using observer::Mat;

/// Small per-document facts recorded at capture time (t_star, context_len, ...).
using DocMeta = std::map<std::string, int>;

// IEEE 754 binary16, round-to-nearest-even.
uint16_t f32_to_f16(float value);
float f16_to_f32(uint16_t bits);

/// Content address of one capture configuration (model, spec, hook point).
std::string spec_hash(const std::string& model_id, const observer::CaptureSpec& spec,
                      const std::string& hook_point);

/// Per-document activation archive for a single (model, capture-spec) pair.
///
/// Layout: root/store.json identifies the configuration; each document lives
/// under root/docs/<doc_id>/ as manifest.json plus one raw little-endian
/// row-major tensor file per captured tensor. One writer, many readers.
class ActivationStore {
public:
    ActivationStore(fs::path root, std::string model_id, observer::CaptureSpec spec,
                    std::string hook_point = "resid_post");

    const fs::path& root() const { return root_; }
    const std::string& model_id() const { return model_id_; }
    const observer::CaptureSpec& spec() const { return spec_; }
    const std::string& hash() const { return hash_; }

    bool contains(const std::string& doc_id) const;
    std::vector<std::string> doc_ids() const;

    /// Fails if doc_id is already present.
    void put(const std::string& doc_id, const observer::CapturedActivations& acts,
             const DocMeta& meta = {});

    /// Full round trip; verifies every tensor checksum.
    observer::CapturedActivations get(const std::string& doc_id) const;

    DocMeta doc_meta(const std::string& doc_id) const;

    /// Ranged reads that avoid loading whole tensors.
    Eigen::VectorXd resid_row(const std::string& doc_id, int layer, int token) const;
    Mat resid(const std::string& doc_id, int layer) const;
    int doc_T(const std::string& doc_id) const;

private:
    fs::path doc_dir(const std::string& doc_id) const;

    fs::path root_;
    std::string model_id_;
    observer::CaptureSpec spec_;
    std::string hook_point_;
    std::string hash_;
};

}  // namespace obsprobe::store
