#include <doctest.h>

#include <bit>
#include <cmath>

#include <json.hpp>

#include "helpers.hpp"
#include "obsprobe/store.hpp"

using namespace obsprobe;
using namespace obsprobe::store;

namespace {

observer::CaptureSpec full_spec(observer::Dtype dtype = observer::Dtype::f32) {
    observer::CaptureSpec spec;
    spec.layers = {0, 1, 2};
    spec.capture_attention = true;
    spec.capture_head_outputs = true;
    spec.capture_mlp_outputs = true;
    spec.capture_logits = true;
    spec.dtype = dtype;
    return spec;
}

observer::CapturedActivations sample_acts(uint64_t seed) {
    const int T = 5, d = 8, H = 2, V = 13;
    Rng rng(seed);
    auto fill = [&](Mat& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal();
        }
    };
    observer::CapturedActivations acts;
    acts.T = T;
    for (int k : {0, 1, 2}) {
        acts.resid[k] = Mat(T, d);
        fill(acts.resid[k]);
    }
    for (int b : {0, 1}) {
        acts.attn[b].resize(H);
        for (int h = 0; h < H; ++h) {
            Mat p = Mat::Zero(T, T);
            for (int t = 0; t < T; ++t) {
                for (int j = 0; j <= t; ++j) p(t, j) = rng.uniform();
                p.row(t) /= p.row(t).sum();
            }
            acts.attn[b][h] = p;
            acts.head_out[{b, h}] = Mat(T, d);
            fill(acts.head_out[{b, h}]);
        }
        acts.mlp_out[b] = Mat(T, d);
        fill(acts.mlp_out[b]);
    }
    acts.logits = Mat(T, V);
    fill(acts.logits);
    return acts;
}

double f32_round(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

TEST_CASE("binary16 encoding matches the reference converter") {
    // pairs generated with numpy: (f32 bit pattern, expected f16 bit pattern)
    const struct {
        uint32_t f32;
        uint16_t f16;
    } cases[] = {
        {0x00000000u, 0x0000u}, {0x80000000u, 0x8000u}, {0x3f800000u, 0x3c00u},
        {0xbf800000u, 0xbc00u}, {0x3f000000u, 0x3800u}, {0x40100000u, 0x4080u},
        {0xc0100000u, 0xc080u}, {0x477fe000u, 0x7bffu}, {0x477fef80u, 0x7bffu},
        {0x477ff000u, 0x7c00u}, {0xc77ff000u, 0xfc00u}, {0x4788b800u, 0x7c00u},
        {0x322bcc77u, 0x0000u}, {0xb22bcc77u, 0x8000u}, {0x337ffae5u, 0x0001u},
        {0x387fda40u, 0x03ffu}, {0x387fc000u, 0x03ffu}, {0x38000000u, 0x0200u},
        {0x3dcccccdu, 0x2e66u}, {0x3e4ccccdu, 0x3266u}, {0x3e99999au, 0x34cdu},
        {0x3eaaaaabu, 0x3555u}, {0x40490fdbu, 0x4248u}, {0xc02df854u, 0xc170u},
        {0x44801000u, 0x6400u}, {0x44800fffu, 0x6400u}, {0x45000800u, 0x6800u},
        {0x45001800u, 0x6801u}, {0x3a0007f8u, 0x1000u}, {0x42052000u, 0x5029u},
        {0x38ff8000u, 0x07fcu}, {0x3a8007f8u, 0x1400u}, {0x3fc00000u, 0x3e00u},
        {0xbfc00000u, 0xbe00u}, {0x42f6e979u, 0x57b7u}, {0x7149f2cau, 0x7c00u},
        {0xf149f2cau, 0xfc00u}, {0x33000000u, 0x0000u}, {0x33000001u, 0x0001u},
        {0x33c00000u, 0x0002u},
    };
    for (const auto& c : cases) {
        float v = std::bit_cast<float>(c.f32);
        INFO("value ", v);
        CHECK(f32_to_f16(v) == c.f16);
    }
    CHECK(f32_to_f16(std::numeric_limits<float>::quiet_NaN()) == 0x7e00);
    CHECK(std::isnan(f16_to_f32(0x7e01)));
    CHECK(std::isinf(f16_to_f32(0x7c00)));
    CHECK(f16_to_f32(0xfc00) < 0);
}

TEST_CASE("binary16 decode then encode is the identity on canonical values") {
    for (uint32_t bits = 0; bits <= 0xffffu; ++bits) {
        auto h = static_cast<uint16_t>(bits);
        if (((h >> 10) & 0x1f) == 31 && (h & 0x3ff)) continue;  // nan payloads collapse
        CHECK(f32_to_f16(f16_to_f32(h)) == h);
    }
}

TEST_CASE("put then get round-trips every tensor at f32 precision") {
    testing::TempDir tmp("store-rt");
    ActivationStore st(tmp.path, "golden2", full_spec());
    auto acts = sample_acts(1);
    st.put("doc-a", acts);

    CHECK(st.contains("doc-a"));
    auto got = st.get("doc-a");
    CHECK(got.T == acts.T);
    for (const auto& [k, m] : acts.resid) {
        REQUIRE(got.resid.count(k) == 1);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            CHECK(got.resid[k].data()[i] == f32_round(m.data()[i]));
        }
    }
    for (const auto& [b, heads] : acts.attn) {
        REQUIRE(got.attn.at(b).size() == heads.size());
        for (size_t h = 0; h < heads.size(); ++h) {
            for (Eigen::Index i = 0; i < heads[h].size(); ++i) {
                CHECK(got.attn.at(b)[h].data()[i] == f32_round(heads[h].data()[i]));
            }
        }
    }
    for (const auto& [key, m] : acts.head_out) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            CHECK(got.head_out.at(key).data()[i] == f32_round(m.data()[i]));
        }
    }
    CHECK(got.logits.rows() == acts.logits.rows());
    for (Eigen::Index i = 0; i < acts.logits.size(); ++i) {
        CHECK(got.logits.data()[i] == f32_round(acts.logits.data()[i]));
    }
}

TEST_CASE("resid_row slices a single token without full load") {
    testing::TempDir tmp("store-slice");
    ActivationStore st(tmp.path, "golden2", full_spec());
    auto acts = sample_acts(2);
    st.put("doc-b", acts);
    auto full = st.get("doc-b");
    for (int k : {0, 1, 2}) {
        for (int t = 0; t < acts.T; ++t) {
            Eigen::VectorXd row = st.resid_row("doc-b", k, t);
            CHECK((row.transpose() - full.resid[k].row(t)).cwiseAbs().maxCoeff() == 0.0);
        }
    }
    CHECK_THROWS_AS(st.resid_row("doc-b", 0, 99), RuntimeError);
    CHECK_THROWS_AS(st.resid_row("doc-b", 7, 0), RuntimeError);
    Mat m = st.resid("doc-b", 1);
    CHECK((m - full.resid[1]).cwiseAbs().maxCoeff() == 0.0);
    CHECK(st.doc_T("doc-b") == acts.T);
}

TEST_CASE("get on a missing doc fails") {
    testing::TempDir tmp("store-miss");
    ActivationStore st(tmp.path, "golden2", full_spec());
    CHECK_FALSE(st.contains("nope"));
    CHECK_THROWS_WITH_AS(st.get("nope"), doctest::Contains("not found"), RuntimeError);
}

TEST_CASE("double put is rejected") {
    testing::TempDir tmp("store-dup");
    ActivationStore st(tmp.path, "golden2", full_spec());
    st.put("doc-c", sample_acts(3));
    CHECK_THROWS_WITH_AS(st.put("doc-c", sample_acts(3)), doctest::Contains("already"),
                         RuntimeError);
}

TEST_CASE("corrupted tensor bytes fail the checksum on read") {
    testing::TempDir tmp("store-corrupt");
    ActivationStore st(tmp.path, "golden2", full_spec());
    st.put("doc-d", sample_acts(4));
    auto victim = tmp.path / "docs" / "doc-d" / "resid.1.bin";
    auto vals = read_f32_file(victim);
    vals[3] += 0.25f;
    write_f32_file(victim, vals.data(), vals.size());
    CHECK_THROWS_WITH_AS(st.get("doc-d"), doctest::Contains("checksum"), RuntimeError);
}

TEST_CASE("tensor files match their declared shapes in bytes") {
    testing::TempDir tmp("store-bytes");
    ActivationStore st(tmp.path, "golden2", full_spec());
    st.put("doc-e", sample_acts(5));
    auto manifest =
        nlohmann::json::parse(read_text_file(tmp.path / "docs" / "doc-e" / "manifest.json"));
    for (const auto& [name, entry] : manifest.at("tensors").items()) {
        size_t n = 1;
        for (size_t s : entry.at("shape").get<std::vector<size_t>>()) n *= s;
        auto file = tmp.path / "docs" / "doc-e" / entry.at("file").get<std::string>();
        INFO(name);
        CHECK(fs::file_size(file) == n * 4);
    }
}

TEST_CASE("doc_ids lists entries in insertion order") {
    testing::TempDir tmp("store-order");
    ActivationStore st(tmp.path, "golden2", full_spec());
    st.put("z-last-name", sample_acts(6));
    st.put("a-first-name", sample_acts(7));
    auto ids = st.doc_ids();
    REQUIRE(ids.size() == 2);
    CHECK(ids[0] == "z-last-name");
    CHECK(ids[1] == "a-first-name");
}

TEST_CASE("reopening requires the identical capture configuration") {
    testing::TempDir tmp("store-reopen");
    {
        ActivationStore st(tmp.path, "golden2", full_spec());
        st.put("doc-f", sample_acts(8));
    }
    ActivationStore again(tmp.path, "golden2", full_spec());
    CHECK(again.contains("doc-f"));

    auto other = full_spec();
    other.layers = {0};
    CHECK_THROWS_AS(ActivationStore(tmp.path, "golden2", other), ConfigError);
    CHECK_THROWS_AS(ActivationStore(tmp.path, "different-model", full_spec()), ConfigError);
}

TEST_CASE("spec hashes separate distinct configurations") {
    auto a = spec_hash("m", full_spec(), "resid_post");
    auto spec = full_spec();
    spec.layers = {1};
    CHECK(spec_hash("m", spec, "resid_post") != a);
    CHECK(spec_hash("m2", full_spec(), "resid_post") != a);
    CHECK(spec_hash("m", full_spec(), "resid_pre") != a);
    CHECK(spec_hash("m", full_spec(), "resid_post") == a);
}

TEST_CASE("unsafe doc ids are rejected") {
    testing::TempDir tmp("store-ids");
    ActivationStore st(tmp.path, "golden2", full_spec());
    CHECK_THROWS_AS(st.put("", sample_acts(9)), RuntimeError);
    CHECK_THROWS_AS(st.put("../escape", sample_acts(9)), RuntimeError);
    CHECK_THROWS_AS(st.put("has space", sample_acts(9)), RuntimeError);
    CHECK_THROWS_AS(st.put("..", sample_acts(9)), RuntimeError);
    CHECK_THROWS_AS(st.contains("a/b"), RuntimeError);
}

TEST_CASE("f16 storage halves the bytes and reads back within half precision") {
    testing::TempDir tmp("store-f16");
    ActivationStore st(tmp.path, "golden2", full_spec(observer::Dtype::f16));
    auto acts = sample_acts(10);
    st.put("doc-g", acts);

    auto file = tmp.path / "docs" / "doc-g" / "resid.0.bin";
    CHECK(fs::file_size(file) == static_cast<size_t>(acts.resid[0].size()) * 2);

    auto got = st.get("doc-g");
    for (int k : {0, 1, 2}) {
        for (Eigen::Index i = 0; i < acts.resid[k].size(); ++i) {
            double orig = acts.resid[k].data()[i];
            double back = got.resid[k].data()[i];
            CHECK(std::abs(back - orig) <= std::abs(orig) * 1e-3 + 1e-4);
            // reading must return exactly the stored half value
            CHECK(static_cast<double>(f16_to_f32(f32_to_f16(static_cast<float>(orig)))) == back);
        }
    }
    Eigen::VectorXd row = st.resid_row("doc-g", 2, 3);
    CHECK((row.transpose() - got.resid[2].row(3)).cwiseAbs().maxCoeff() == 0.0);
}
