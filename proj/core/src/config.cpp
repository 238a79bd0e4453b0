#include "cyclevar/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace cyclevar {

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw Error("config: key '" + key + "' expects a boolean (0/1/true/false), got '" + v + "'");
}

int parse_int(const std::string& key, const std::string& v) {
    size_t pos = 0;
    int out = 0;
    try {
        out = std::stoi(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != v.size() || v.empty())
        throw Error("config: key '" + key + "' expects an integer, got '" + v + "'");
    return out;
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    size_t pos = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != v.size() || v.empty())
        throw Error("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    return uint64_t(out);
}

double parse_double(const std::string& key, const std::string& v) {
    size_t pos = 0;
    double out = 0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != v.size() || v.empty())
        throw Error("config: key '" + key + "' expects a number, got '" + v + "'");
    return out;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

void config_apply(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "image_size") cfg.image_size = parse_int(key, value);
    else if (key == "latent_size") cfg.latent_size = parse_int(key, value);
    else if (key == "latent_channels") cfg.latent_channels = parse_int(key, value);
    else if (key == "vae_base") cfg.vae_base = parse_int(key, value);
    else if (key == "vocab") cfg.vocab = parse_int(key, value);
    else if (key == "tau") cfg.tau = parse_double(key, value);
    else if (key == "gumbel") cfg.gumbel = parse_bool(key, value);
    else if (key == "hard") cfg.hard = parse_bool(key, value);
    else if (key == "bitwise") cfg.bitwise = parse_bool(key, value);
    else if (key == "bitwise_d") cfg.bitwise_d = parse_int(key, value);
    else if (key == "width") cfg.width = parse_int(key, value);
    else if (key == "heads") cfg.heads = parse_int(key, value);
    else if (key == "blocks") cfg.blocks = parse_int(key, value);
    else if (key == "mlp_ratio") cfg.mlp_ratio = parse_int(key, value);
    else if (key == "mode") cfg.mode = value;
    else if (key == "fusion_a") cfg.fusion_a = parse_double(key, value);
    else if (key == "drop_ms_output") cfg.drop_ms_output = parse_bool(key, value);
    else if (key == "drop_ms_context") cfg.drop_ms_context = parse_bool(key, value);
    else if (key == "w_cyc") cfg.w_cyc = parse_double(key, value);
    else if (key == "w_gan") cfg.w_gan = parse_double(key, value);
    else if (key == "w_idt") cfg.w_idt = parse_double(key, value);
    else if (key == "w_p") cfg.w_p = parse_double(key, value);
    else if (key == "lr") cfg.lr = parse_double(key, value);
    else if (key == "warmup") cfg.warmup = parse_int(key, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_double(key, value);
    else if (key == "steps") cfg.steps = parse_int(key, value);
    else if (key == "batch") cfg.batch = parse_int(key, value);
    else if (key == "pretrain_steps") cfg.pretrain_steps = parse_int(key, value);
    else if (key == "pretrain_batch") cfg.pretrain_batch = parse_int(key, value);
    else if (key == "pretrain_lr") cfg.pretrain_lr = parse_double(key, value);
    else if (key == "disc_base") cfg.disc_base = parse_int(key, value);
    else if (key == "eval_every") cfg.eval_every = parse_int(key, value);
    else if (key == "eval_n") cfg.eval_n = parse_int(key, value);
    else if (key == "log_every") cfg.log_every = parse_int(key, value);
    else if (key == "repeats") cfg.repeats = parse_int(key, value);
    else if (key == "bench_warmup") cfg.bench_warmup = parse_int(key, value);
    else if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "out_dir") cfg.out_dir = value;
    else
        throw Error("config: unknown key '" + key + "'");
}

RunConfig config_load(const std::string& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw Error("config: cannot open '" + path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw Error("config: " + path + ":" + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw Error("config: " + path + ":" + std::to_string(lineno) + ": empty key");
        config_apply(base, key, value);
    }
    return base;
}

void config_validate(const RunConfig& cfg) {
    auto fail = [](const std::string& msg) { throw Error("config: " + msg); };
    if (!(cfg.tau > 0.0))
        fail("tau must be > 0 (got " + std::to_string(cfg.tau) +
             "); the relaxation divides logits by tau");
    if (cfg.fusion_a < 0.0 || cfg.fusion_a > 1.0)
        fail("fusion_a must lie in [0,1] (got " + std::to_string(cfg.fusion_a) +
             "); it blends refined output against the encoder latent");
    if (cfg.latent_size < 1)
        fail("latent_size must be >= 1 (got " + std::to_string(cfg.latent_size) +
             "); the scale schedule needs at least one level");
    if (cfg.image_size < 1) fail("image_size must be >= 1");
    if (cfg.image_size % cfg.latent_size != 0)
        fail("image_size must be a multiple of latent_size (got " +
             std::to_string(cfg.image_size) + " / " + std::to_string(cfg.latent_size) + ")");
    {
        int ratio = cfg.image_size / cfg.latent_size;
        if (ratio < 2 || (ratio & (ratio - 1)) != 0)
            fail("image_size / latent_size must be a power of two >= 2 (got " +
                 std::to_string(ratio) + "); each encoder stage halves the grid");
        int side = cfg.latent_size;
        if ((side & (side - 1)) != 0)
            fail("latent_size must be a power of two (got " + std::to_string(side) +
                 "); scales double per level");
    }
    if (cfg.latent_channels < 1) fail("latent_channels must be >= 1");
    if (cfg.vae_base < 1) fail("vae_base must be >= 1");
    if (cfg.vocab < 2)
        fail("vocab must be >= 2 (got " + std::to_string(cfg.vocab) +
             "); one code cannot carry a distribution");
    if (cfg.bitwise) {
        if (cfg.bitwise_d < 1 || cfg.bitwise_d > 30) fail("bitwise_d must lie in [1,30]");
        if (cfg.vocab != (1 << cfg.bitwise_d))
            fail("bitwise quantization needs vocab == 2^bitwise_d (got vocab=" +
                 std::to_string(cfg.vocab) + ", bitwise_d=" + std::to_string(cfg.bitwise_d) + ")");
    }
    if (cfg.width < 1) fail("width must be >= 1");
    if (cfg.heads < 1) fail("heads must be >= 1");
    if (cfg.width % cfg.heads != 0)
        fail("width must be divisible by heads (got " + std::to_string(cfg.width) + " / " +
             std::to_string(cfg.heads) + ")");
    if (cfg.blocks < 1) fail("blocks must be >= 1");
    if (cfg.mlp_ratio < 1) fail("mlp_ratio must be >= 1");
    if (cfg.mode != "serial" && cfg.mode != "parallel")
        fail("mode must be 'serial' or 'parallel' (got '" + cfg.mode + "')");
    if ((cfg.drop_ms_output || cfg.drop_ms_context) && cfg.mode == "serial")
        fail("multi-scale ablation flags only apply to parallel mode");
    if (cfg.lr <= 0.0) fail("lr must be > 0");
    if (cfg.pretrain_lr <= 0.0) fail("pretrain_lr must be > 0");
    if (cfg.warmup < 0) fail("warmup must be >= 0");
    if (cfg.weight_decay < 0.0) fail("weight_decay must be >= 0");
    if (cfg.steps < 0) fail("steps must be >= 0");
    if (cfg.batch < 1) fail("batch must be >= 1");
    if (cfg.pretrain_steps < 0) fail("pretrain_steps must be >= 0");
    if (cfg.pretrain_batch < 1) fail("pretrain_batch must be >= 1");
    if (cfg.disc_base < 1) fail("disc_base must be >= 1");
    if (cfg.image_size >= 8 && cfg.image_size % 8 != 0)
        fail("image_size must be a multiple of 8 so the discriminator can downsample three times");
    if (cfg.image_size < 8)
        fail("image_size must be >= 8 for the discriminator (got " +
             std::to_string(cfg.image_size) + ")");
    if (cfg.eval_every < 1) fail("eval_every must be >= 1");
    if (cfg.eval_n < 2) fail("eval_n must be >= 2 (covariance needs two samples)");
    if (cfg.log_every < 0) fail("log_every must be >= 0 (0 is quiet)");
    if (cfg.repeats < 1) fail("repeats must be >= 1");
    if (cfg.bench_warmup < 0) fail("bench_warmup must be >= 0");
    if (cfg.out_dir.empty()) fail("out_dir must not be empty");
}

std::vector<std::string> config_dump(const RunConfig& cfg) {
    std::vector<std::string> out;
    auto add = [&](const std::string& k, const std::string& v) { out.push_back(k + "=" + v); };
    auto num = [](double v) {
        std::ostringstream ss;
        ss << v;
        return ss.str();
    };
    add("image_size", std::to_string(cfg.image_size));
    add("latent_size", std::to_string(cfg.latent_size));
    add("latent_channels", std::to_string(cfg.latent_channels));
    add("vae_base", std::to_string(cfg.vae_base));
    add("vocab", std::to_string(cfg.vocab));
    add("tau", num(cfg.tau));
    add("gumbel", cfg.gumbel ? "1" : "0");
    add("hard", cfg.hard ? "1" : "0");
    add("bitwise", cfg.bitwise ? "1" : "0");
    add("bitwise_d", std::to_string(cfg.bitwise_d));
    add("width", std::to_string(cfg.width));
    add("heads", std::to_string(cfg.heads));
    add("blocks", std::to_string(cfg.blocks));
    add("mlp_ratio", std::to_string(cfg.mlp_ratio));
    add("mode", cfg.mode);
    add("fusion_a", num(cfg.fusion_a));
    add("drop_ms_output", cfg.drop_ms_output ? "1" : "0");
    add("drop_ms_context", cfg.drop_ms_context ? "1" : "0");
    add("w_cyc", num(cfg.w_cyc));
    add("w_gan", num(cfg.w_gan));
    add("w_idt", num(cfg.w_idt));
    add("w_p", num(cfg.w_p));
    add("lr", num(cfg.lr));
    add("warmup", std::to_string(cfg.warmup));
    add("weight_decay", num(cfg.weight_decay));
    add("steps", std::to_string(cfg.steps));
    add("batch", std::to_string(cfg.batch));
    add("pretrain_steps", std::to_string(cfg.pretrain_steps));
    add("pretrain_batch", std::to_string(cfg.pretrain_batch));
    add("pretrain_lr", num(cfg.pretrain_lr));
    add("disc_base", std::to_string(cfg.disc_base));
    add("eval_every", std::to_string(cfg.eval_every));
    add("eval_n", std::to_string(cfg.eval_n));
    add("log_every", std::to_string(cfg.log_every));
    add("repeats", std::to_string(cfg.repeats));
    add("bench_warmup", std::to_string(cfg.bench_warmup));
    add("seed", std::to_string(cfg.seed));
    add("out_dir", cfg.out_dir);
    return out;
}

}  // namespace cyclevar
