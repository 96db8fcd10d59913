#include "dyncap/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "dyncap/errors.hpp"

namespace dyncap {

namespace fs = std::filesystem;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << text;
}

std::string prepare_run_dir(const RunConfig& cfg) {
    const std::string dir = cfg.resolve_run_dir();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create run directory " + dir + ": " + ec.message());
    write_text(dir + "/config.txt", cfg.to_text());
    return dir;
}

int split_count(const RunConfig& cfg, const std::string& split) {
    if (split == "train") return cfg.n_train;
    if (split == "val") return cfg.n_val;
    if (split == "test") return cfg.n_test;
    throw ConfigError("unknown dataset split '" + split + "'");
}

std::uint64_t split_stream(const std::string& split) {
    if (split == "train") return 10;
    if (split == "val") return 11;
    return 12;
}

Captioner<float> build_model(const RunConfig& cfg, const Vocabulary& vocab) {
    RngState init_rng = RngState::derive(cfg.seed, 0);
    return Captioner<float>(cfg.model_config(vocab.size()), init_rng);
}

}  // namespace

Dataset load_split(const RunConfig& cfg, const std::string& split) {
    const std::string base = cfg.data_dir + "/" + split;
    auto ds = read_features(base + ".feat");
    ds.vocab = Vocabulary::load(cfg.data_dir + "/vocab.txt");
    read_captions(base + ".cap", ds);
    return ds;
}

CommandResult cmd_gen_data(const RunConfig& cfg) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(cfg.data_dir, ec);
    if (ec) throw IoError("cannot create data directory " + cfg.data_dir);

    CommandResult result;
    result.run_dir = cfg.data_dir;
    auto spec = cfg.dataset_spec();
    for (const std::string split : {"train", "val", "test"}) {
        spec.n_per_family = split_count(cfg, split) / 2;
        RngState rng = RngState::derive(cfg.seed, split_stream(split));
        auto ds = gen_dataset(rng, spec);
        const std::string base = cfg.data_dir + "/" + split;
        write_features(base + ".feat", ds);
        write_captions(base + ".cap", ds);
        result.outputs.push_back(base + ".feat");
        result.outputs.push_back(base + ".cap");
        if (split == std::string("train")) {
            ds.vocab.save(cfg.data_dir + "/vocab.txt");
            result.outputs.push_back(cfg.data_dir + "/vocab.txt");
        }
    }
    write_text(cfg.data_dir + "/config.txt", cfg.to_text());
    return result;
}

CommandResult cmd_train(const RunConfig& cfg, const std::string& phase) {
    cfg.validate();
    if (phase != "ce" && phase != "scst" && phase != "both") {
        throw ConfigError("train phase must be ce, scst, or both (got '" + phase + "')");
    }
    auto train = load_split(cfg, "train");

    CommandResult result;
    result.run_dir = prepare_run_dir(cfg);

    auto model = build_model(cfg, train.vocab);
    if (!cfg.init_checkpoint.empty()) model.load(cfg.init_checkpoint);
    Trainer<float> trainer(model, train, cfg.train_options());

    std::ofstream log(result.run_dir + "/train.log");
    if (!log) throw IoError("cannot write " + result.run_dir + "/train.log");

    const auto checkpoint_cb = [&](const std::string& tag) {
        const std::string path = result.run_dir + "/" + tag + ".ckpt";
        model.save(path);
        result.outputs.push_back(path);
    };

    if (phase != "scst") {
        for (int e = 0; e < cfg.ce_epochs; ++e) {
            const double avg = trainer.run_epoch(Phase::CE, e, &log);
            std::cout << "ce epoch " << e << " loss " << avg << "\n";
            if (cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0) {
                checkpoint_cb("ce_epoch" + std::to_string(e));
            }
        }
        checkpoint_cb("model_ce");
    }
    if (phase != "ce") {
        if (phase == "scst" && cfg.init_checkpoint.empty()) {
            throw ConfigError("train --phase scst needs init_checkpoint");
        }
        for (int e = 0; e < cfg.scst_epochs; ++e) {
            const double avg = trainer.run_epoch(Phase::SCST, e, &log);
            std::cout << "scst epoch " << e << " loss " << avg << "\n";
            if (cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0) {
                checkpoint_cb("scst_epoch" + std::to_string(e));
            }
        }
    }
    checkpoint_cb("model");
    return result;
}

CommandResult cmd_eval(const RunConfig& cfg, const std::string& checkpoint) {
    cfg.validate();
    auto test = load_split(cfg, "test");
    auto model = build_model(cfg, test.vocab);
    model.load(checkpoint);

    CommandResult result;
    result.run_dir = prepare_run_dir(cfg);

    auto rep = evaluate(model, test, parse_decode(cfg.decode), cfg.beam_size, cfg.seed);
    std::ostringstream os;
    os << "metric       value\n";
    os << "BLEU-1       " << rep.bleu1 << "\n";
    os << "BLEU-4       " << rep.bleu4 << "\n";
    os << "CIDEr-D      " << rep.cider << "\n";
    os << "exact-match  " << rep.exact << "\n";
    os << "samples      " << rep.n << "\n";
    os << "[results]\n";
    os << "bleu1 = " << rep.bleu1 << "\n";
    os << "bleu4 = " << rep.bleu4 << "\n";
    os << "cider_d = " << rep.cider << "\n";
    os << "exact_match = " << rep.exact << "\n";
    std::cout << os.str();
    write_text(result.run_dir + "/eval.txt", os.str());
    result.outputs.push_back(result.run_dir + "/eval.txt");

    std::ostringstream caps;
    for (int i = 0; i < test.size(); ++i) {
        caps << test.features[static_cast<std::size_t>(i)].sample_id << '\t'
             << rep.generated[static_cast<std::size_t>(i)] << '\n';
    }
    write_text(result.run_dir + "/captions.tsv", caps.str());
    result.outputs.push_back(result.run_dir + "/captions.tsv");
    return result;
}

CommandResult cmd_route_inspect(const RunConfig& cfg, const std::string& checkpoint,
                                const std::string& split) {
    cfg.validate();
    auto ds = load_split(cfg, split);
    auto model = build_model(cfg, ds.vocab);
    model.load(checkpoint);

    CommandResult result;
    result.run_dir = prepare_run_dir(cfg);

    std::ostringstream routes;
    std::map<int, int> active_histogram;  // total active cells -> sample count
    const int bs = 32;
    for (int start = 0; start < ds.size(); start += bs) {
        std::vector<int> idx;
        for (int i = start; i < std::min(ds.size(), start + bs); ++i) idx.push_back(i);
        EncoderTrace trace;
        model.encode(batch_features<float>(ds, idx), Mode::Eval, nullptr, &trace);
        std::vector<int> totals(idx.size(), 0);
        for (const auto& entry : trace) {
            const int B = static_cast<int>(idx.size());
            auto weights = DTensor::from_data({B, entry.paths}, entry.weights);
            const auto active = discretize_paths(weights, cfg.threshold);
            for (int b = 0; b < B; ++b) {
                routes << ds.features[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])].sample_id
                       << '\t' << entry.layer << '\t' << entry.block;
                for (int k = 0; k < entry.paths; ++k) {
                    routes << '\t' << entry.weights[static_cast<std::size_t>(b * entry.paths + k)];
                }
                routes << '\t' << "active=";
                const auto& act = active[static_cast<std::size_t>(b)];
                for (std::size_t k = 0; k < act.size(); ++k) {
                    routes << (k ? "," : "") << act[k];
                }
                routes << '\n';
                totals[static_cast<std::size_t>(b)] += static_cast<int>(act.size());
            }
        }
        for (int t : totals) ++active_histogram[t];
    }
    write_text(result.run_dir + "/routes.tsv", routes.str());
    result.outputs.push_back(result.run_dir + "/routes.tsv");

    std::ostringstream hist;
    hist << "active_cells samples\n";
    for (const auto& [count, samples] : active_histogram) {
        hist << count << ' ' << samples << '\n';
    }
    std::cout << hist.str();
    write_text(result.run_dir + "/active_histogram.txt", hist.str());
    result.outputs.push_back(result.run_dir + "/active_histogram.txt");
    return result;
}

CommandResult cmd_diverse_sample(const RunConfig& cfg, const std::string& checkpoint,
                                 std::uint64_t sample_id, int k, const std::string& split) {
    cfg.validate();
    if (k < 1) throw ConfigError("diverse-sample needs k >= 1");
    auto ds = load_split(cfg, split);
    int index = -1;
    for (int i = 0; i < ds.size(); ++i) {
        if (ds.features[static_cast<std::size_t>(i)].sample_id == sample_id) index = i;
    }
    if (index < 0) {
        throw ConfigError("sample id " + std::to_string(sample_id) + " not in split " + split);
    }
    auto model = build_model(cfg, ds.vocab);
    model.load(checkpoint);

    CommandResult result;
    result.run_dir = prepare_run_dir(cfg);

    auto features = batch_features<float>(ds, {index});
    EncoderTrace trace;
    model.encode(features, Mode::Eval, nullptr, &trace);

    RngState path_rng = RngState::derive(cfg.seed, 20);
    const int layers = model.encoder().layer_count();
    std::ostringstream out;
    for (int sample = 0; sample < k; ++sample) {
        ForcedPaths forced(static_cast<std::size_t>(layers));
        for (int l = 0; l < layers; ++l) {
            forced[static_cast<std::size_t>(l)].assign(
                static_cast<std::size_t>(model.encoder().layer(l).block_count()), 0);
        }
        std::string path_desc;
        for (const auto& entry : trace) {
            // draw one cell per block from the router's soft distribution
            const double u = path_rng.next_uniform();
            double acc = 0;
            int pick = entry.paths - 1;
            for (int j = 0; j < entry.paths; ++j) {
                acc += entry.weights[static_cast<std::size_t>(j)];
                if (u < acc) {
                    pick = j;
                    break;
                }
            }
            auto& layer = model.encoder().layer(entry.layer);
            int bi = 0;
            for (; bi < layer.block_count(); ++bi) {
                if (layer.block_label(bi) == entry.block) break;
            }
            forced[static_cast<std::size_t>(entry.layer)][static_cast<std::size_t>(bi)] = pick;
            path_desc += (path_desc.empty() ? "" : " ") + std::to_string(entry.layer) + ":" +
                         entry.block + "=" +
                         cell_name(layer.block_cells(bi)[static_cast<std::size_t>(pick)].kind());
        }
        auto memory = model.encode(features, Mode::Eval, nullptr, nullptr, &forced);
        auto hyp = model.decoder().decode_greedy(memory, cfg.max_len)[0];
        std::vector<int> ids = hyp.tokens;
        std::string caption;
        for (int id : ids) {
            if (!caption.empty()) caption.push_back(' ');
            caption += ds.vocab.token(id);
        }
        out << sample_id << '\t' << path_desc << '\t' << caption << '\n';
    }
    std::cout << out.str();
    write_text(result.run_dir + "/diverse.tsv", out.str());
    result.outputs.push_back(result.run_dir + "/diverse.tsv");
    return result;
}

}  // namespace dyncap
