#include "lsskd/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace lsskd {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) parts.push_back(trim(part));
    return parts;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected a number, got '" + v + "'");
    }
}

long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected an integer, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("config key " + key + ": expected true/false, got '" + v + "'");
}

std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (const auto& p : split_commas(v)) out.push_back(parse_double(key, p));
    return out;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    for (const auto& p : split_commas(v))
        out.push_back(static_cast<int>(parse_int(key, p)));
    return out;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <class T>
std::string join(const std::vector<T>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        if constexpr (std::is_same_v<T, double>)
            out += fmt_double(v[i]);
        else
            out += std::to_string(v[i]);
    }
    return out;
}

} // namespace

AppConfig parse_config_text(const std::string& text) {
    AppConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (!seen.insert(key).second)
            throw ConfigError("config key " + key + " appears more than once");

        if (key == "dataset.name") cfg.dataset_name = value;
        else if (key == "dataset.dir") cfg.dataset_dir = value;
        else if (key == "dataset.mean") cfg.dataset_mean = parse_double_list(key, value);
        else if (key == "dataset.std") cfg.dataset_std = parse_double_list(key, value);
        else if (key == "fewshot.fraction") cfg.fewshot_fraction = parse_double(key, value);
        else if (key == "model.stages") cfg.model_stages = static_cast<int>(parse_int(key, value));
        else if (key == "model.channels") cfg.model_channels = parse_int_list(key, value);
        else if (key == "model.blocks") cfg.model_blocks = parse_int_list(key, value);
        else if (key == "train.epochs") cfg.train_epochs = static_cast<std::uint32_t>(parse_int(key, value));
        else if (key == "train.batch") cfg.train_batch = static_cast<std::size_t>(parse_int(key, value));
        else if (key == "train.lr0") cfg.train_lr0 = parse_double(key, value);
        else if (key == "train.momentum") cfg.train_momentum = parse_double(key, value);
        else if (key == "train.wd") cfg.train_wd = parse_double(key, value);
        else if (key == "train.milestones") {
            cfg.train_milestones.clear();
            for (int m : parse_int_list(key, value))
                cfg.train_milestones.push_back(static_cast<std::uint32_t>(m));
        } else if (key == "train.decay") cfg.train_decay = parse_double(key, value);
        else if (key == "train.mode") {
            if (value != "lsskd" && value != "baseline")
                throw ConfigError("train.mode must be lsskd or baseline");
            cfg.train_mode = value;
        }
        else if (key == "distill.alpha") cfg.distill_alpha = parse_double(key, value);
        else if (key == "distill.beta") cfg.distill_beta = parse_double(key, value);
        else if (key == "distill.gamma") cfg.distill_gamma = parse_double(key, value);
        else if (key == "distill.tau_kd") cfg.distill_tau_kd = parse_double(key, value);
        else if (key == "distill.alpha_warmup") cfg.distill_alpha_warmup = parse_bool(key, value);
        else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
        else if (key == "out.dir") cfg.out_dir = value;
        else throw ConfigError("unknown config key: " + key);
    }
    return cfg;
}

AppConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::string serialize_config(const AppConfig& c) {
    std::ostringstream os;
    os << "dataset.name = " << c.dataset_name << "\n";
    os << "dataset.dir = " << c.dataset_dir << "\n";
    if (!c.dataset_mean.empty()) os << "dataset.mean = " << join(c.dataset_mean) << "\n";
    if (!c.dataset_std.empty()) os << "dataset.std = " << join(c.dataset_std) << "\n";
    os << "fewshot.fraction = " << fmt_double(c.fewshot_fraction) << "\n";
    os << "model.stages = " << c.model_stages << "\n";
    os << "model.channels = " << join(c.model_channels) << "\n";
    os << "model.blocks = " << join(c.model_blocks) << "\n";
    os << "train.epochs = " << c.train_epochs << "\n";
    os << "train.batch = " << c.train_batch << "\n";
    os << "train.lr0 = " << fmt_double(c.train_lr0) << "\n";
    os << "train.momentum = " << fmt_double(c.train_momentum) << "\n";
    os << "train.wd = " << fmt_double(c.train_wd) << "\n";
    std::vector<int> ms(c.train_milestones.begin(), c.train_milestones.end());
    os << "train.milestones = " << join(ms) << "\n";
    os << "train.decay = " << fmt_double(c.train_decay) << "\n";
    os << "train.mode = " << c.train_mode << "\n";
    os << "distill.alpha = " << fmt_double(c.distill_alpha) << "\n";
    os << "distill.beta = " << fmt_double(c.distill_beta) << "\n";
    os << "distill.gamma = " << fmt_double(c.distill_gamma) << "\n";
    os << "distill.tau_kd = " << fmt_double(c.distill_tau_kd) << "\n";
    os << "distill.alpha_warmup = " << (c.distill_alpha_warmup ? "true" : "false") << "\n";
    os << "seed = " << c.seed << "\n";
    os << "out.dir = " << c.out_dir << "\n";
    return os.str();
}

TrainConfig make_train_config(const AppConfig& c) {
    TrainConfig t;
    t.epochs = c.train_epochs;
    t.batch_size = c.train_batch;
    t.lr0 = c.train_lr0;
    t.momentum = c.train_momentum;
    t.weight_decay = c.train_wd;
    t.milestones = c.train_milestones;
    t.decay_factor = c.train_decay;
    t.seed = c.seed;
    t.fewshot_fraction = c.fewshot_fraction;
    t.hp.alpha = c.distill_alpha;
    t.hp.beta = c.distill_beta;
    t.hp.gamma = c.distill_gamma;
    t.hp.tau_kd = c.distill_tau_kd;
    t.hp.alpha_warmup = c.distill_alpha_warmup;
    t.baseline_mode = (c.train_mode == "baseline");
    t.out_dir = c.out_dir;
    t.validate();
    return t;
}

BackboneConfig make_backbone_config(const AppConfig& c, const DatasetMeta& meta) {
    BackboneConfig b;
    b.stages = c.model_stages;
    b.channels = c.model_channels;
    b.blocks_per_stage = c.model_blocks;
    b.in_channels = meta.channels;
    b.height = meta.height;
    b.width = meta.width;
    b.num_classes = meta.num_classes;
    b.num_transforms = 4;
    b.validate();
    return b;
}

} // namespace lsskd
