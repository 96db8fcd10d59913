#pragma once

// Flat key-value run configuration. Every knob has a default, unknown keys
// are rejected, and the effective config is serializable as a "key = value"
// text document written next to a run's outputs.

#include <map>
#include <string>
#include <vector>

#include "dyncap/datagen.hpp"
#include "dyncap/model.hpp"
#include "dyncap/training.hpp"

namespace dyncap {

struct RunConfig {
    // run
    std::uint64_t seed = 42;
    std::string data_dir = "data";
    std::string out_root = "runs";
    std::string run_dir;  // empty: out_root/<timestamp>-seed<seed>
    std::string init_checkpoint;

    // dataset
    int grid_h = 7, grid_w = 7, grid_c = 32;
    int n_train = 2000, n_val = 200, n_test = 200;
    double noise_sigma = 0.1;

    // model
    int layers = 2, dec_layers = 2, d_model = 64, heads = 4;
    std::string spatial_cells = "gmc,lmc,amc";
    std::string channel_cells = "cpc,cac";
    std::string arrangement = "s_then_c";
    bool grouping = true;
    std::string custom_groups;  // "gmc,lmc,amc|cpc,cac"
    std::string router = "scjr";
    std::string routing = "soft";
    double temperature = 1.0;
    int r1 = 16, r2 = 7;
    int max_len = 10;

    // training
    int batch_size = 16;
    int ce_epochs = 10;
    int scst_epochs = 1;
    double lr_scale = 10.0;
    double lr_override = 0.0;
    double clip_norm = 5.0;
    int beam_size = 5;
    int scst_batch_size = 8;
    int checkpoint_every = 0;

    // eval / inspection
    std::string decode = "greedy";
    double threshold = 0.3;

    static const std::vector<std::string>& keys();
    std::string get(const std::string& key) const;
    // Returns an error message, or empty on success.
    std::string set(const std::string& key, const std::string& value);

    // Applies file entries then overrides; collects every bad key/value and
    // throws a single ConfigError listing them all.
    void apply(const std::map<std::string, std::string>& file_entries,
               const std::map<std::string, std::string>& overrides);

    std::string to_text() const;
    static std::map<std::string, std::string> parse_text(const std::string& text,
                                                         const std::string& what);
    static std::map<std::string, std::string> read_file(const std::string& path);

    void validate() const;  // throws ConfigError listing every bad key

    DatasetSpec dataset_spec() const;
    ModelConfig model_config(int vocab) const;
    TrainOptions train_options() const;

    // out_root/<timestamp>-seed<seed> unless run_dir is set explicitly.
    std::string resolve_run_dir() const;
};

std::vector<CellKind> parse_cell_list(const std::string& csv);

}  // namespace dyncap
