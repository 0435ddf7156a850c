#include "meddiff/model.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "meddiff/error.hpp"

namespace meddiff {

namespace {

void push(std::vector<TensorRef>& refs, const std::string& name, Eigen::MatrixXd& m) {
    refs.push_back({name, m.data(), m.rows(), m.cols()});
}

void push(std::vector<TensorRef>& refs, const std::string& name, Eigen::VectorXd& v) {
    refs.push_back({name, v.data(), v.size(), 1});
}

void push(std::vector<TensorRef>& refs, const std::string& name, Eigen::Vector2d& v) {
    refs.push_back({name, v.data(), 2, 1});
}

}  // namespace

std::vector<TensorRef> tensor_refs(ModelParams& p) {
    std::vector<TensorRef> refs;
    push(refs, "embed.W_v", p.embed.W_v);
    push(refs, "embed.b_v", p.embed.b_v);
    push(refs, "embed.w_f", p.embed.w_f);
    push(refs, "embed.b_f", p.embed.b_f);
    push(refs, "embed.W_t", p.embed.W_t);
    push(refs, "embed.b_t", p.embed.b_t);
    push(refs, "lstm.W_i", p.lstm.W_i);
    push(refs, "lstm.W_f", p.lstm.W_f);
    push(refs, "lstm.W_o", p.lstm.W_o);
    push(refs, "lstm.W_g", p.lstm.W_g);
    push(refs, "lstm.U_i", p.lstm.U_i);
    push(refs, "lstm.U_f", p.lstm.U_f);
    push(refs, "lstm.U_o", p.lstm.U_o);
    push(refs, "lstm.U_g", p.lstm.U_g);
    push(refs, "lstm.b_i", p.lstm.b_i);
    push(refs, "lstm.b_f", p.lstm.b_f);
    push(refs, "lstm.b_o", p.lstm.b_o);
    push(refs, "lstm.b_g", p.lstm.b_g);
    push(refs, "fusion.W_a", p.fusion.W_a);
    push(refs, "fusion.W_b", p.fusion.W_b);
    push(refs, "fusion.b_b", p.fusion.b_b);
    push(refs, "fusion.W_h", p.fusion.W_h);
    push(refs, "noise.W1", p.noise.W1);
    push(refs, "noise.b1", p.noise.b1);
    push(refs, "noise.W2", p.noise.W2);
    push(refs, "noise.b2", p.noise.b2);
    push(refs, "noise.W3", p.noise.W3);
    push(refs, "noise.b3", p.noise.b3);
    push(refs, "head.W_y", p.head.W_y);
    push(refs, "head.b_y", p.head.b_y);
    return refs;
}

ModelParams make_zero_model(const ModelDims& d) {
    if (d.M < 1 || d.d_e < 1 || d.d_h < 1 || d.d_f < 1 || d.d_b < 1 || d.d_s < 2) {
        throw ValidationError("model dimensions must be positive (d_s >= 2)");
    }
    ModelParams p;
    p.embed.W_v = Eigen::MatrixXd::Zero(d.d_e, d.M);
    p.embed.b_v = Eigen::VectorXd::Zero(d.d_e);
    p.embed.w_f = Eigen::VectorXd::Zero(d.d_f);
    p.embed.b_f = Eigen::VectorXd::Zero(d.d_f);
    p.embed.W_t = Eigen::MatrixXd::Zero(d.d_e, d.d_f);
    p.embed.b_t = Eigen::VectorXd::Zero(d.d_e);
    for (auto* m : {&p.lstm.W_i, &p.lstm.W_f, &p.lstm.W_o, &p.lstm.W_g}) {
        *m = Eigen::MatrixXd::Zero(d.d_h, d.d_e);
    }
    for (auto* m : {&p.lstm.U_i, &p.lstm.U_f, &p.lstm.U_o, &p.lstm.U_g}) {
        *m = Eigen::MatrixXd::Zero(d.d_h, d.d_h);
    }
    for (auto* v : {&p.lstm.b_i, &p.lstm.b_f, &p.lstm.b_o, &p.lstm.b_g}) {
        *v = Eigen::VectorXd::Zero(d.d_h);
    }
    p.fusion.W_a = Eigen::MatrixXd::Zero(2, d.d_b);
    p.fusion.W_b = Eigen::MatrixXd::Zero(d.d_b, 2 * d.d_e);
    p.fusion.b_b = Eigen::VectorXd::Zero(d.d_b);
    p.fusion.W_h = Eigen::MatrixXd::Zero(d.d_e, d.d_h);
    p.noise.d_s = d.d_s;
    p.noise.W1 = Eigen::MatrixXd::Zero(d.d_e, d.d_e + d.d_s);
    p.noise.b1 = Eigen::VectorXd::Zero(d.d_e);
    p.noise.W2 = Eigen::MatrixXd::Zero(d.d_e, d.d_e);
    p.noise.b2 = Eigen::VectorXd::Zero(d.d_e);
    p.noise.W3 = Eigen::MatrixXd::Zero(d.d_e, d.d_e);
    p.noise.b3 = Eigen::VectorXd::Zero(d.d_e);
    p.head.W_y = Eigen::MatrixXd::Zero(2, d.d_h);
    p.head.b_y = Eigen::Vector2d::Zero();
    return p;
}

ModelParams init_model(const ModelDims& d, RngStream rng) {
    ModelParams p = make_zero_model(d);
    // fan_in per tensor: the input width of the layer it belongs to.
    auto fan_for = [&](const std::string& name) -> double {
        if (name.rfind("embed.W_v", 0) == 0 || name == "embed.b_v") return d.M;
        if (name == "embed.w_f" || name == "embed.b_f") return 1.0;
        if (name == "embed.W_t" || name == "embed.b_t") return d.d_f;
        if (name.rfind("lstm.W_", 0) == 0) return d.d_e;
        if (name.rfind("lstm.U_", 0) == 0 || name.rfind("lstm.b_", 0) == 0) return d.d_h;
        if (name == "fusion.W_a") return d.d_b;
        if (name == "fusion.W_b" || name == "fusion.b_b") return 2.0 * d.d_e;
        if (name == "fusion.W_h") return d.d_h;
        if (name == "noise.W1" || name == "noise.b1") return d.d_e + d.d_s;
        if (name.rfind("noise.", 0) == 0) return d.d_e;
        if (name.rfind("head.", 0) == 0) return d.d_h;
        throw ValidationError("unknown tensor " + name);
    };
    for (TensorRef& ref : tensor_refs(p)) {
        const double bound = 1.0 / std::sqrt(fan_for(ref.name));
        for (long i = 0; i < ref.size(); ++i) {
            ref.data[i] = (2.0 * rng.uniform() - 1.0) * bound;
        }
    }
    return p;
}

ModelDims dims_from_kv(const KvMap& kv) {
    ModelDims d;
    d.M = static_cast<int>(kv_get_int(kv, "vocab_size", 0));
    d.d_e = static_cast<int>(kv_get_int(kv, "d_e", d.d_e));
    d.d_h = static_cast<int>(kv_get_int(kv, "d_h", d.d_h));
    d.d_f = static_cast<int>(kv_get_int(kv, "d_f", d.d_f));
    d.d_b = static_cast<int>(kv_get_int(kv, "d_b", d.d_b));
    d.d_s = static_cast<int>(kv_get_int(kv, "d_s", d.d_s));
    return d;
}

long parameter_count(ModelParams& params) {
    long total = 0;
    for (const TensorRef& ref : tensor_refs(params)) total += ref.size();
    return total;
}

void save_checkpoint(const std::string& path, const KvMap& config, ModelParams& params) {
    std::ostringstream out;
    out << "meddiff-checkpoint v1\n";
    out << "#config " << config.size() << "\n";
    out << serialize_kv(config);
    std::vector<TensorRef> refs = tensor_refs(params);
    out << "#tensors " << refs.size() << "\n";
    for (const TensorRef& ref : refs) {
        out << ref.name << " " << ref.rows << " " << ref.cols << "\n";
    }
    out << "#data\n";
    for (const TensorRef& ref : refs) {
        out.write(reinterpret_cast<const char*>(ref.data),
                  static_cast<std::streamsize>(ref.size() * sizeof(double)));
    }

    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
    {
        std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
        if (!file) throw ValidationError("cannot write " + tmp.string());
        const std::string blob = out.str();
        file.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!file) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, target);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw ValidationError("cannot open checkpoint " + path);
    std::string line;
    if (!std::getline(file, line) || line != "meddiff-checkpoint v1") {
        throw ParseError("not a checkpoint file: " + path);
    }
    if (!std::getline(file, line) || line.rfind("#config ", 0) != 0) {
        throw ParseError("checkpoint missing #config header");
    }
    const long n_config = std::stol(line.substr(8));
    std::string kv_text;
    for (long i = 0; i < n_config; ++i) {
        if (!std::getline(file, line)) throw ParseError("checkpoint truncated in config block");
        kv_text += line;
        kv_text += '\n';
    }
    Checkpoint ckpt;
    ckpt.config = parse_kv_text(kv_text);
    ckpt.params = make_zero_model(dims_from_kv(ckpt.config));

    if (!std::getline(file, line) || line.rfind("#tensors ", 0) != 0) {
        throw ParseError("checkpoint missing #tensors header");
    }
    const size_t n_tensors = static_cast<size_t>(std::stol(line.substr(9)));
    std::vector<TensorRef> refs = tensor_refs(ckpt.params);
    if (n_tensors != refs.size()) {
        throw ParseError("checkpoint tensor count " + std::to_string(n_tensors) + ", expected " +
                         std::to_string(refs.size()));
    }
    for (const TensorRef& ref : refs) {
        if (!std::getline(file, line)) throw ParseError("checkpoint truncated in shape block");
        std::istringstream shape(line);
        std::string name;
        long rows = 0, cols = 0;
        shape >> name >> rows >> cols;
        if (name != ref.name || rows != ref.rows || cols != ref.cols) {
            throw ParseError("checkpoint shape mismatch at " + ref.name + ": got " + line);
        }
    }
    if (!std::getline(file, line) || line != "#data") throw ParseError("checkpoint missing #data");
    for (TensorRef& ref : refs) {
        file.read(reinterpret_cast<char*>(ref.data),
                  static_cast<std::streamsize>(ref.size() * sizeof(double)));
        if (!file) throw ParseError("checkpoint truncated in data block at " + ref.name);
    }
    return ckpt;
}

}  // namespace meddiff
