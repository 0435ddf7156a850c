#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "meddiff/error.hpp"
#include "meddiff/model.hpp"

using namespace meddiff;
namespace fs = std::filesystem;

namespace {

ModelDims small_dims() {
    ModelDims d;
    d.M = 6;
    d.d_e = 5;
    d.d_h = 4;
    d.d_f = 3;
    d.d_b = 3;
    d.d_s = 4;
    return d;
}

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / "meddiff-model-test") {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("tensor traversal order is fixed") {
    const ModelDims d = small_dims();
    ModelParams p = make_zero_model(d);
    const auto refs = tensor_refs(p);
    REQUIRE(refs.size() == 30);
    CHECK(refs.front().name == "embed.W_v");
    CHECK(refs[6].name == "lstm.W_i");
    CHECK(refs[18].name == "fusion.W_a");
    CHECK(refs[22].name == "noise.W1");
    CHECK(refs.back().name == "head.b_y");

    CHECK(refs.front().rows == d.d_e);
    CHECK(refs.front().cols == d.M);
    CHECK(refs[22].cols == d.d_e + d.d_s);
    CHECK(refs.back().rows == 2);

    long total = 0;
    for (const auto& r : refs) total += r.size();
    CHECK(parameter_count(p) == total);
    CHECK(total > 0);
}

TEST_CASE("dimension validation") {
    ModelDims d = small_dims();
    d.d_s = 1;
    CHECK_THROWS_AS(make_zero_model(d), ValidationError);
    d = small_dims();
    d.M = 0;
    CHECK_THROWS_AS(make_zero_model(d), ValidationError);
}

TEST_CASE("initialization respects per-tensor fan-in bounds") {
    const ModelDims d = small_dims();
    ModelParams p = init_model(d, RngStream(7));
    const auto within = [](const double* data, long size, double bound) {
        for (long i = 0; i < size; ++i) {
            if (std::abs(data[i]) > bound) return false;
        }
        return true;
    };
    CHECK(within(p.embed.W_v.data(), p.embed.W_v.size(), 1.0 / std::sqrt(double(d.M))));
    CHECK(within(p.embed.w_f.data(), p.embed.w_f.size(), 1.0));
    CHECK(within(p.lstm.W_i.data(), p.lstm.W_i.size(), 1.0 / std::sqrt(double(d.d_e))));
    CHECK(within(p.lstm.U_g.data(), p.lstm.U_g.size(), 1.0 / std::sqrt(double(d.d_h))));
    CHECK(within(p.fusion.W_b.data(), p.fusion.W_b.size(), 1.0 / std::sqrt(2.0 * d.d_e)));
    CHECK(within(p.noise.W1.data(), p.noise.W1.size(), 1.0 / std::sqrt(double(d.d_e + d.d_s))));
    CHECK(within(p.head.W_y.data(), p.head.W_y.size(), 1.0 / std::sqrt(double(d.d_h))));

    // Should actually be random, not left at zero.
    CHECK(p.embed.W_v.cwiseAbs().maxCoeff() > 0.0);
    CHECK(p.lstm.U_f.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("initialization is seed-deterministic") {
    const ModelDims d = small_dims();
    ModelParams a = init_model(d, RngStream(11));
    ModelParams b = init_model(d, RngStream(11));
    ModelParams c = init_model(d, RngStream(12));
    const auto ra = tensor_refs(a);
    const auto rb = tensor_refs(b);
    const auto rc = tensor_refs(c);
    bool same = true, differs = false;
    for (size_t i = 0; i < ra.size(); ++i) {
        same = same && std::memcmp(ra[i].data, rb[i].data, ra[i].size() * sizeof(double)) == 0;
        differs = differs || std::memcmp(ra[i].data, rc[i].data, ra[i].size() * sizeof(double)) != 0;
    }
    CHECK(same);
    CHECK(differs);
}

TEST_CASE("dims round trip through kv") {
    KvMap kv;
    kv["vocab_size"] = "9";
    kv["d_e"] = "12";
    kv["d_s"] = "6";
    const ModelDims d = dims_from_kv(kv);
    CHECK(d.M == 9);
    CHECK(d.d_e == 12);
    CHECK(d.d_s == 6);
    CHECK(d.d_h == 256);  // untouched defaults
    CHECK(d.d_f == 64);
}

TEST_CASE("checkpoint reload is bit identical") {
    TempDir tmp;
    const ModelDims d = small_dims();
    ModelParams p = init_model(d, RngStream(21));
    KvMap config;
    config["vocab_size"] = std::to_string(d.M);
    config["d_e"] = std::to_string(d.d_e);
    config["d_h"] = std::to_string(d.d_h);
    config["d_f"] = std::to_string(d.d_f);
    config["d_b"] = std::to_string(d.d_b);
    config["d_s"] = std::to_string(d.d_s);
    config["learning_rate"] = "0.00125";
    config["note"] = "round trip";

    const std::string path = (tmp.path / "ckpt.bin").string();
    save_checkpoint(path, config, p);
    Checkpoint loaded = load_checkpoint(path);

    CHECK(loaded.config == config);
    const auto orig = tensor_refs(p);
    const auto back = tensor_refs(loaded.params);
    REQUIRE(orig.size() == back.size());
    for (size_t i = 0; i < orig.size(); ++i) {
        CHECK(orig[i].name == back[i].name);
        CHECK(std::memcmp(orig[i].data, back[i].data, orig[i].size() * sizeof(double)) == 0);
    }
    CHECK(fs::exists(path));
    CHECK(!fs::exists(path + ".tmp"));
}

TEST_CASE("checkpoint corruption is detected") {
    TempDir tmp;
    const std::string missing = (tmp.path / "nope.bin").string();
    CHECK_THROWS_AS(load_checkpoint(missing), ValidationError);

    const std::string garbage = (tmp.path / "garbage.bin").string();
    {
        std::ofstream f(garbage);
        f << "definitely not a checkpoint\n";
    }
    CHECK_THROWS_AS(load_checkpoint(garbage), ParseError);

    // Valid file chopped inside the data block.
    const ModelDims d = small_dims();
    ModelParams p = init_model(d, RngStream(22));
    KvMap config;
    config["vocab_size"] = std::to_string(d.M);
    config["d_e"] = std::to_string(d.d_e);
    config["d_h"] = std::to_string(d.d_h);
    config["d_f"] = std::to_string(d.d_f);
    config["d_b"] = std::to_string(d.d_b);
    config["d_s"] = std::to_string(d.d_s);
    const std::string whole = (tmp.path / "whole.bin").string();
    save_checkpoint(whole, config, p);
    std::ifstream in(whole, std::ios::binary);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const std::string cut = (tmp.path / "cut.bin").string();
    {
        std::ofstream f(cut, std::ios::binary);
        f.write(blob.data(), static_cast<std::streamsize>(blob.size() - blob.size() / 3));
    }
    CHECK_THROWS_AS(load_checkpoint(cut), ParseError);
}
