#include "dyncap/config.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "dyncap/errors.hpp"

namespace dyncap {

namespace {

enum class Kind { U64, Int, Double, Bool, Str };

struct Field {
    const char* name;
    Kind kind;
    std::size_t offset;
};

#define DYNCAP_FIELD(kind, member) {#member, kind, offsetof(RunConfig, member)}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        DYNCAP_FIELD(Kind::U64, seed),
        DYNCAP_FIELD(Kind::Str, data_dir),
        DYNCAP_FIELD(Kind::Str, out_root),
        DYNCAP_FIELD(Kind::Str, run_dir),
        DYNCAP_FIELD(Kind::Str, init_checkpoint),
        DYNCAP_FIELD(Kind::Int, grid_h),
        DYNCAP_FIELD(Kind::Int, grid_w),
        DYNCAP_FIELD(Kind::Int, grid_c),
        DYNCAP_FIELD(Kind::Int, n_train),
        DYNCAP_FIELD(Kind::Int, n_val),
        DYNCAP_FIELD(Kind::Int, n_test),
        DYNCAP_FIELD(Kind::Double, noise_sigma),
        DYNCAP_FIELD(Kind::Int, layers),
        DYNCAP_FIELD(Kind::Int, dec_layers),
        DYNCAP_FIELD(Kind::Int, d_model),
        DYNCAP_FIELD(Kind::Int, heads),
        DYNCAP_FIELD(Kind::Str, spatial_cells),
        DYNCAP_FIELD(Kind::Str, channel_cells),
        DYNCAP_FIELD(Kind::Str, arrangement),
        DYNCAP_FIELD(Kind::Bool, grouping),
        DYNCAP_FIELD(Kind::Str, custom_groups),
        DYNCAP_FIELD(Kind::Str, router),
        DYNCAP_FIELD(Kind::Str, routing),
        DYNCAP_FIELD(Kind::Double, temperature),
        DYNCAP_FIELD(Kind::Int, r1),
        DYNCAP_FIELD(Kind::Int, r2),
        DYNCAP_FIELD(Kind::Int, max_len),
        DYNCAP_FIELD(Kind::Int, batch_size),
        DYNCAP_FIELD(Kind::Int, ce_epochs),
        DYNCAP_FIELD(Kind::Int, scst_epochs),
        DYNCAP_FIELD(Kind::Double, lr_scale),
        DYNCAP_FIELD(Kind::Double, lr_override),
        DYNCAP_FIELD(Kind::Double, clip_norm),
        DYNCAP_FIELD(Kind::Int, beam_size),
        DYNCAP_FIELD(Kind::Int, scst_batch_size),
        DYNCAP_FIELD(Kind::Int, checkpoint_every),
        DYNCAP_FIELD(Kind::Str, decode),
        DYNCAP_FIELD(Kind::Double, threshold),
    };
    return f;
}

#undef DYNCAP_FIELD

template <class T>
T* at(RunConfig& cfg, std::size_t off) {
    return reinterpret_cast<T*>(reinterpret_cast<char*>(&cfg) + off);
}
template <class T>
const T* at(const RunConfig& cfg, std::size_t off) {
    return reinterpret_cast<const T*>(reinterpret_cast<const char*>(&cfg) + off);
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const auto& f : fields()) out.push_back(f.name);
        return out;
    }();
    return k;
}

std::string RunConfig::get(const std::string& key) const {
    for (const auto& f : fields()) {
        if (key != f.name) continue;
        switch (f.kind) {
            case Kind::U64: return std::to_string(*at<std::uint64_t>(*this, f.offset));
            case Kind::Int: return std::to_string(*at<int>(*this, f.offset));
            case Kind::Double: return fmt_double(*at<double>(*this, f.offset));
            case Kind::Bool: return *at<bool>(*this, f.offset) ? "true" : "false";
            case Kind::Str: return *at<std::string>(*this, f.offset);
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::set(const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (key != f.name) continue;
        try {
            switch (f.kind) {
                case Kind::U64: *at<std::uint64_t>(*this, f.offset) = std::stoull(value); break;
                case Kind::Int: *at<int>(*this, f.offset) = std::stoi(value); break;
                case Kind::Double: *at<double>(*this, f.offset) = std::stod(value); break;
                case Kind::Bool: {
                    if (value == "true" || value == "1") *at<bool>(*this, f.offset) = true;
                    else if (value == "false" || value == "0") *at<bool>(*this, f.offset) = false;
                    else return key + ": expected true/false, got '" + value + "'";
                    break;
                }
                case Kind::Str: *at<std::string>(*this, f.offset) = value; break;
            }
        } catch (const std::exception&) {
            return key + ": cannot parse '" + value + "'";
        }
        return "";
    }
    return "unknown config key '" + key + "'";
}

void RunConfig::apply(const std::map<std::string, std::string>& file_entries,
                      const std::map<std::string, std::string>& overrides) {
    std::vector<std::string> errors;
    for (const auto& [k, v] : file_entries) {
        if (overrides.count(k)) continue;  // flags win
        const auto err = set(k, v);
        if (!err.empty()) errors.push_back(err);
    }
    for (const auto& [k, v] : overrides) {
        const auto err = set(k, v);
        if (!err.empty()) errors.push_back(err);
    }
    if (!errors.empty()) {
        std::string msg = "config errors:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
}

std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& f : fields()) {
        out += std::string(f.name) + " = " + get(f.name) + "\n";
    }
    return out;
}

std::map<std::string, std::string> RunConfig::parse_text(const std::string& text,
                                                         const std::string& what) {
    std::map<std::string, std::string> out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(what + ": line " + std::to_string(lineno) + " is not 'key = value'");
        }
        out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

std::map<std::string, std::string> RunConfig::read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config file " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_text(text, path);
}

std::vector<CellKind> parse_cell_list(const std::string& csv) {
    std::vector<CellKind> out;
    std::string cur;
    std::istringstream is(csv);
    while (std::getline(is, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(parse_cell(cur));
    }
    return out;
}

void RunConfig::validate() const {
    std::vector<std::string> errors;
    auto check = [&](bool ok, const std::string& msg) {
        if (!ok) errors.push_back(msg);
    };
    check(grid_h >= 3 && grid_w >= 3, "grid_h/grid_w: must be >= 3");
    check(grid_c >= 16 && grid_c % 4 == 0, "grid_c: must be >= 16 and a multiple of 4");
    check(n_train >= 2 && n_val >= 2 && n_test >= 2, "n_train/n_val/n_test: must be >= 2");
    check(noise_sigma >= 0, "noise_sigma: must be >= 0");
    check(layers >= 0, "layers: must be >= 0");
    check(dec_layers >= 1, "dec_layers: must be >= 1");
    check(d_model >= 1 && heads >= 1 && d_model % heads == 0, "d_model/heads: heads must divide d_model");
    check(temperature > 0, "temperature: must be > 0");
    check(r1 >= 1 && r2 >= 1, "r1/r2: must be >= 1");
    check(max_len >= 1, "max_len: must be >= 1");
    check(batch_size >= 1 && scst_batch_size >= 1, "batch_size: must be >= 1");
    check(ce_epochs >= 0 && scst_epochs >= 0, "ce_epochs/scst_epochs: must be >= 0");
    check(lr_scale > 0, "lr_scale: must be > 0");
    check(lr_override >= 0, "lr_override: must be >= 0");
    check(clip_norm > 0, "clip_norm: must be > 0");
    check(beam_size >= 1, "beam_size: must be >= 1");
    check(threshold > 0 && threshold < 1, "threshold: must lie in (0,1)");
    try {
        parse_arrangement(arrangement);
    } catch (const ConfigError& e) {
        errors.push_back(e.what());
    }
    try {
        parse_router(router);
        parse_routing(routing);
        parse_decode(decode);
        parse_cell_list(spatial_cells);
        parse_cell_list(channel_cells);
    } catch (const ConfigError& e) {
        errors.push_back(e.what());
    }
    if (!errors.empty()) {
        std::string msg = "config validation failed:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    model_config(16).encoder.validate();  // cell/grouping coherence
}

DatasetSpec RunConfig::dataset_spec() const {
    DatasetSpec spec;
    spec.h = grid_h;
    spec.w = grid_w;
    spec.c = grid_c;
    spec.noise_sigma = noise_sigma;
    return spec;
}

ModelConfig RunConfig::model_config(int vocab) const {
    ModelConfig mc;
    mc.encoder.layers = layers;
    mc.encoder.d_model = d_model;
    mc.encoder.heads = heads;
    mc.encoder.grid_h = grid_h;
    mc.encoder.grid_w = grid_w;
    mc.encoder.spatial_cells = parse_cell_list(spatial_cells);
    mc.encoder.channel_cells = parse_cell_list(channel_cells);
    mc.encoder.arrangement = parse_arrangement(arrangement);
    mc.encoder.grouped = grouping;
    if (!custom_groups.empty()) {
        const auto bar = custom_groups.find('|');
        if (bar == std::string::npos) {
            throw ConfigError("custom_groups: expected 'cells|cells', got '" + custom_groups + "'");
        }
        mc.encoder.custom_groups = {parse_cell_list(custom_groups.substr(0, bar)),
                                    parse_cell_list(custom_groups.substr(bar + 1))};
    }
    mc.encoder.router_variant = parse_router(router);
    mc.encoder.routing_type = parse_routing(routing);
    mc.encoder.temperature = temperature;
    mc.encoder.r1 = r1;
    mc.encoder.r2 = r2;
    mc.dec_layers = dec_layers;
    mc.vocab = vocab;
    mc.max_len = max_len;
    return mc;
}

TrainOptions RunConfig::train_options() const {
    TrainOptions o;
    o.batch_size = batch_size;
    o.lr_scale = lr_scale;
    o.lr_override = lr_override;
    o.clip_norm = clip_norm;
    o.beam_k = beam_size;
    o.scst_batch_size = scst_batch_size;
    o.seed = seed;
    return o;
}

std::string RunConfig::resolve_run_dir() const {
    if (!run_dir.empty()) return run_dir;
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
    return out_root + "/" + buf + "-seed" + std::to_string(seed);
}

}  // namespace dyncap
