// aben: data preparation, training, evaluation and generation front end.
//
// Exit codes: 0 ok, 1 usage/config, 2 data, 3 I/O, 4 non-finite loss.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "aben/aben.hpp"
#include "aben/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace aben;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kIo = 3, kNonFinite = 4 };

void write_json(const fs::path& path, const ordered_json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

std::vector<SceneSample> absolute_paths(std::vector<SceneSample> scenes) {
    for (auto& s : scenes) s.image_path = fs::absolute(s.image_path).lexically_normal();
    return scenes;
}

SplitRatios parse_ratios(const std::string& text) {
    std::vector<double> v;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            v.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("--ratios: cannot parse '" + item + "'");
        }
    }
    if (v.size() != 3) throw ConfigError("--ratios expects train,validation,test");
    return {v[0], v[1], v[2]};
}

// Reads a split file written by prepare-data; any rejected record is a data error.
std::vector<SceneSample> read_split(const fs::path& data_dir, const std::string& split) {
    const fs::path p = data_dir / (split + ".jsonl");
    if (!fs::exists(p)) throw IoError("split file not found: " + p.string());
    auto loaded = read_scene_records(p, true);
    if (!loaded.report.rejected.empty())
        throw ValidationError(p.string() + ": " + std::to_string(loaded.report.rejected.size()) + " invalid record(s); first: " +
                              loaded.report.rejected.front().reasons.front());
    return loaded.scenes;
}

// ---------------------------------------------------------------------------

struct PrepareArgs {
    std::string input, out, ratios = "0.8,0.1,0.1";
    std::uint64_t seed = 0;
    std::size_t vocab_size = 10000;
    bool skip_image_check = false;
};

int cmd_prepare(const PrepareArgs& a) {
    const SplitRatios ratios = parse_ratios(a.ratios);
    if (!fs::exists(a.input)) throw IoError("input not found: " + a.input);
    DatasetSplit split = load_dataset(a.input, ratios, a.seed, !a.skip_image_check);
    const fs::path out = a.out;
    ensure_dir(out);
    write_json(out / "validation_report.json", split.report.to_json());
    if (split.train.empty()) {
        std::cerr << "error: no valid training scenes\n";
        return kData;
    }
    write_scene_records(out / "train.jsonl", absolute_paths(split.train));
    write_scene_records(out / "validation.jsonl", absolute_paths(split.validation));
    write_scene_records(out / "test.jsonl", absolute_paths(split.test));
    write_json(out / "standardization.json", stats_to_json(split.standardization));
    std::vector<std::string> sentences;
    for (const auto& p : expand_pairs(split.train)) sentences.push_back(p.sentence);
    const SubwordVocabulary vocab = build_vocabulary(sentences, a.vocab_size);
    save_vocabulary(out / "vocab.txt", vocab);

    auto pairs = [](const std::vector<SceneSample>& s) { return expand_pairs(s).size(); };
    ordered_json m;
    m["command"] = "prepare-data";
    m["input"] = fs::absolute(a.input).string();
    m["ratios"] = {ratios.train, ratios.validation, ratios.test};
    m["seed"] = a.seed;
    m["scenes"] = {{"train", split.train.size()}, {"validation", split.validation.size()}, {"test", split.test.size()}};
    m["pairs"] = {{"train", pairs(split.train)}, {"validation", pairs(split.validation)}, {"test", pairs(split.test)}};
    m["vocab_size"] = vocab.size();
    m["vocab_hash"] = hash_hex(vocab.hash());
    write_json(out / "manifest.json", m);

    std::cout << "scenes train/validation/test: " << split.train.size() << "/" << split.validation.size() << "/"
              << split.test.size() << "  pairs: " << pairs(split.train) << "/" << pairs(split.validation) << "/"
              << pairs(split.test) << "  vocab: " << vocab.size() << "\n";
    if (!split.report.rejected.empty()) {
        std::cerr << split.report.rejected.size() << " record(s) rejected; see "
                  << (out / "validation_report.json").string() << "\n";
        for (const auto& r : split.report.rejected)
            for (const auto& why : r.reasons) std::cerr << "  line " << r.line << ": " << why << "\n";
        return kData;
    }
    return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config, mode, run_dir, data_dir;
    std::vector<std::uint64_t> seeds;
    int epochs = 0;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
    RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
    if (!a.mode.empty()) cfg.training.mode = parse_sampling_mode(a.mode);
    if (!a.seeds.empty()) cfg.seeds = a.seeds;
    if (a.epochs > 0) cfg.training.epochs = a.epochs;
    if (!a.run_dir.empty()) cfg.run_dir = a.run_dir;
    if (!a.data_dir.empty()) cfg.data_dir = a.data_dir;
    validate(cfg);

    const fs::path data_dir = fs::absolute(cfg.data_dir);
    const SubwordVocabulary vocab = load_vocabulary(cfg.vocab.empty() ? data_dir / "vocab.txt" : fs::path(cfg.vocab));
    const StandardizationStats stats = stats_from_json(read_json(data_dir / "standardization.json"));
    const auto train_scenes = read_split(data_dir, "train");
    const auto val_scenes = read_split(data_dir, "validation");
    if (train_scenes.empty()) throw ValidationError("training split is empty");

    std::optional<EmbeddingTable> loaded_embeddings;
    if (!cfg.embeddings.empty()) {
        loaded_embeddings = load_embeddings(cfg.embeddings);
        if (loaded_embeddings->rows != vocab.size())
            throw ConfigError("embedding table has " + std::to_string(loaded_embeddings->rows) + " rows for a vocabulary of " +
                              std::to_string(vocab.size()));
        if (loaded_embeddings->dim != cfg.model.embed_dim)
            throw ConfigError("embedding table has " + std::to_string(loaded_embeddings->dim) +
                              " columns but model.embed_dim is " + std::to_string(cfg.model.embed_dim));
    }
    ModelConfig mc = cfg.model;
    mc.vocab_size = vocab.size();
    if (cfg.training.generation_max_len > mc.max_len) cfg.training.generation_max_len = mc.max_len;

    const SceneSet train_set = load_scene_set(train_scenes, stats, mc.image_side);
    const SceneSet val_set = load_scene_set(val_scenes, stats, mc.image_side);

    for (std::uint64_t seed : cfg.seeds) {
        const fs::path run = fs::absolute(cfg.run_dir) / ("seed_" + std::to_string(seed));
        ensure_dir(run);
        RunConfig effective = cfg;
        effective.seeds = {seed};
        effective.data_dir = data_dir.string();
        write_json(run / "config.json", to_json(effective));
        ordered_json manifest;
        manifest["command"] = "train";
        manifest["seed"] = seed;
        manifest["mode"] = to_string(cfg.training.mode);
        manifest["data_dir"] = data_dir.string();
        manifest["vocab_hash"] = hash_hex(vocab.hash());
        manifest["train_pairs"] = expand_pairs(train_scenes).size();
        manifest["validation_pairs"] = expand_pairs(val_scenes).size();
        write_json(run / "manifest.json", manifest);

        const EmbeddingTable emb = loaded_embeddings ? *loaded_embeddings : random_embedding_table(vocab.size(), mc.embed_dim, seed);
        AbenModel model(mc, emb, seed);
        const PreparedScenes train_data = prepare_scenes(model, train_set, vocab);
        const PreparedScenes val_data = prepare_scenes(model, val_set, vocab);
        TrainConfig tc = cfg.training;
        tc.seed = seed;
        TrainOutputs outputs;
        outputs.run_dir = run;
        outputs.standardization = stats;
        outputs.extra_manifest = {{"data_dir", data_dir.string()}, {"seed", seed}, {"mode", to_string(tc.mode)}};
        outputs.on_epoch = [&](const EpochRecord& r) {
            if (a.quiet) return;
            std::printf("seed %llu epoch %d  L_total %.6f (v %.4f l %.4f g %.4f)  eps %.3f", static_cast<unsigned long long>(seed),
                        r.epoch, r.train.L_total, r.train.L_v, r.train.L_l, r.train.L_g, r.epsilon);
            if (r.val_meteor) std::printf("  val METEOR %.4f", *r.val_meteor);
            std::printf("\n");
            std::fflush(stdout);
        };
        try {
            const TrainResult res = train(model, train_data, &val_data, vocab, tc, outputs);
            std::cout << "seed " << seed << ": best epoch " << res.best_epoch << " -> " << res.best_checkpoint.string() << "\n";
        } catch (const NonFiniteLossError& e) {
            std::cerr << "error: " << e.what() << "\n" << e.dump().dump(2) << "\n";
            return kNonFinite;
        }
    }
    return kOk;
}

// ---------------------------------------------------------------------------

// A checkpoint directory, a seed run directory (its selected checkpoint) or
// a training run directory (one selected checkpoint per seed).
std::vector<fs::path> resolve_checkpoints(const fs::path& p) {
    if (!fs::exists(p)) throw IoError("checkpoint not found: " + p.string());
    if (fs::exists(p / "weights.bin")) return {p};
    if (fs::exists(p / "selection.json")) {
        const json sel = read_json(p / "selection.json");
        return {fs::path(sel.at("best_checkpoint").get<std::string>())};
    }
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(p))
        if (e.is_directory() && fs::exists(e.path() / "selection.json")) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    std::vector<fs::path> resolved;
    for (const auto& d : out)
        for (auto& c : resolve_checkpoints(d)) resolved.push_back(c);
    if (resolved.empty()) throw IoError("no checkpoint found under " + p.string());
    return resolved;
}

struct EvaluateArgs {
    std::vector<std::string> checkpoints;
    std::string split = "test", data_dir, out, synonyms;
    int runs = 0;
    int max_len = 0;
};

int cmd_evaluate(const EvaluateArgs& a) {
    std::vector<fs::path> ckpts;
    for (const auto& c : a.checkpoints)
        for (auto& r : resolve_checkpoints(c)) ckpts.push_back(r);
    const std::size_t runs = a.runs > 0 ? static_cast<std::size_t>(a.runs) : ckpts.size();
    const metrics::SynonymTable syn = a.synonyms.empty() ? metrics::SynonymTable{} : metrics::SynonymTable::load(a.synonyms);

    std::vector<std::vector<std::string>> generated;
    std::vector<std::vector<std::string>> references;
    ordered_json generations = ordered_json::array();
    for (std::size_t r = 0; r < runs; ++r) {
        const fs::path ck_path = ckpts[r % ckpts.size()];
        LoadedCheckpoint ck = load_checkpoint(ck_path);
        const json manifest = read_manifest(ck_path);
        fs::path data_dir = a.data_dir;
        if (data_dir.empty()) {
            if (!manifest.contains("data_dir")) throw ConfigError("checkpoint does not record its data directory; pass --data-dir");
            data_dir = manifest["data_dir"].get<std::string>();
        }
        const auto scenes = read_split(data_dir, a.split);
        if (scenes.empty()) throw ValidationError("split '" + a.split + "' is empty");
        std::vector<EncodedScene> encoded;
        std::vector<std::vector<std::string>> refs;
        for (const auto& s : scenes) {
            encoded.push_back(ck.model->precompute(prepare_scene(s, ck.meta.standardization, ck.model->config().image_side)));
            refs.push_back(s.references);
        }
        if (references.empty()) references = refs;
        else if (references != refs) throw ContractError("evaluate: runs disagree on the reference corpus");
        const int max_len = a.max_len > 0 ? a.max_len : ck.model->config().max_len;
        generated.push_back(generate_corpus(*ck.model, encoded, ck.vocab, max_len));
        for (std::size_t i = 0; i < scenes.size(); ++i)
            generations.push_back({{"run", r}, {"checkpoint", ck_path.string()}, {"scene", i},
                                   {"generated", generated.back()[i]}, {"references", refs[i]}});
    }
    const metrics::MetricReport report = metrics::evaluate_corpus(generated, references, syn);
    std::cout << report.table();
    if (!a.out.empty()) {
        const fs::path out = a.out;
        ensure_dir(out);
        write_json(out / "metrics.json", report.to_json());
        std::ofstream table(out / "metrics.txt");
        table << report.table();
        std::ofstream gen(out / "generations.jsonl");
        for (const auto& g : generations) gen << g.dump() << '\n';
        ordered_json m;
        m["command"] = "evaluate";
        m["split"] = a.split;
        m["runs"] = runs;
        std::vector<std::string> names;
        for (const auto& c : ckpts) names.push_back(fs::absolute(c).string());
        m["checkpoints"] = names;
        write_json(out / "manifest.json", m);
        if (!gen || !table) throw IoError("cannot write evaluation outputs in " + out.string());
    }
    return kOk;
}

// ---------------------------------------------------------------------------

SceneSample read_scene(const fs::path& path, std::size_t index) {
    if (!fs::exists(path)) throw IoError("scene file not found: " + path.string());
    std::ifstream in(path);
    std::stringstream buf;
    buf << in.rdbuf();
    const json whole = json::parse(buf.str(), nullptr, false);
    if (!whole.is_discarded() && whole.is_object()) {
        std::vector<std::string> reasons;
        auto s = validate_record(whole, path.parent_path(), reasons, true);
        if (!s) throw ValidationError("scene: " + reasons.front());
        return *s;
    }
    auto loaded = read_scene_records(path, true);
    if (!loaded.report.rejected.empty() && loaded.scenes.size() <= index)
        throw ValidationError("scene: " + loaded.report.rejected.front().reasons.front());
    if (index >= loaded.scenes.size())
        throw ValidationError("scene index " + std::to_string(index) + " out of range (" +
                              std::to_string(loaded.scenes.size()) + " valid scenes)");
    return loaded.scenes[index];
}

struct GenerateArgs {
    std::string checkpoint, scene, out, upsample = "bilinear";
    std::size_t index = 0;
    int max_len = 0;
};

int cmd_generate(const GenerateArgs& a, bool inspect) {
    const auto ckpts = resolve_checkpoints(a.checkpoint);
    LoadedCheckpoint ck = load_checkpoint(ckpts.front());
    const SceneSample scene = read_scene(a.scene, a.index);
    const Image image = load_image(scene.image_path);
    const SceneInputs inputs = prepare_scene(scene, image, ck.meta.standardization, ck.model->config().image_side);
    const int max_len = a.max_len > 0 ? a.max_len : ck.model->config().max_len;
    const GenerationResult result = generate(*ck.model, ck.model->precompute(inputs), ck.vocab, max_len);
    std::cout << result.sentence << "\n";
    if (result.truncated) std::cerr << "warning: no [EOS] within " << max_len << " tokens; result is truncated\n";
    if (!a.out.empty()) {
        const Upsampling mode = a.upsample == "nearest" ? Upsampling::Nearest : Upsampling::Bilinear;
        export_attention(result, image, a.out, ck.vocab, mode);
        if (inspect) {
            for (std::size_t k = 0; k < result.steps.size(); ++k) {
                const auto& st = result.steps[k];
                std::cout << "step " << (k + 1) << " -> " << ck.vocab.token(st.token) << ":";
                for (std::size_t j = 0; j < st.slot_tokens.size(); ++j) {
                    const std::string label = st.slot_tokens[j] == kEncoderSlot ? "<enc>" : ck.vocab.token(st.slot_tokens[j]);
                    std::printf(" %s=%.3f", label.c_str(), st.linguistic_weights[j]);
                    std::fflush(stdout);
                }
                std::cout << "\n";
            }
        }
    }
    return kOk;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    int scenes = 20;
    int references = 1;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
    SyntheticOptions opt;
    opt.references = a.references;
    auto scenes = make_synthetic_scenes(a.scenes, a.seed, opt);
    std::cout << write_synthetic_dataset(a.out, scenes).string() << "\n";
    return kOk;
}

template <typename F>
int guarded(F&& f) {
    try {
        return f();
    } catch (const NonFiniteLossError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNonFinite;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNonFinite;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fetching-instruction generation with visual and linguistic attention branches"};
    app.require_subcommand(1);

    PrepareArgs prep;
    auto* p = app.add_subcommand("prepare-data", "Validate, split and standardize a scene JSONL file");
    p->add_option("--input", prep.input, "Scene JSONL file")->required();
    p->add_option("--out", prep.out, "Output directory")->required();
    p->add_option("--ratios", prep.ratios, "train,validation,test fractions")->capture_default_str();
    p->add_option("--seed", prep.seed, "Split seed")->capture_default_str();
    p->add_option("--vocab-size", prep.vocab_size, "Whole words kept in the built vocabulary")->capture_default_str();
    p->add_flag("--no-image-check", prep.skip_image_check, "Do not require image files to exist");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train one model per seed");
    t->add_option("--config", tr.config, "Run configuration JSON");
    t->add_option("--mode", tr.mode, "tf or ss")->check(CLI::IsMember({"tf", "ss"}));
    t->add_option("--seed", tr.seeds, "Seed (repeat for several runs)");
    t->add_option("--epochs", tr.epochs, "Override the epoch count")->check(CLI::PositiveNumber);
    t->add_option("--run-dir", tr.run_dir, "Override the run directory");
    t->add_option("--data-dir", tr.data_dir, "Override the prepared data directory");
    t->add_flag("--quiet", tr.quiet, "No per-epoch output");

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "Score generated sentences on a split");
    e->add_option("--checkpoint", ev.checkpoints, "Checkpoint, seed run or training run directory (repeatable)")->required();
    e->add_option("--split", ev.split, "train, validation or test")
        ->check(CLI::IsMember({"train", "validation", "test"}))
        ->capture_default_str();
    e->add_option("--runs", ev.runs, "Number of runs (checkpoints are cycled)")->check(CLI::PositiveNumber);
    e->add_option("--data-dir", ev.data_dir, "Prepared data directory (default: recorded in the checkpoint)");
    e->add_option("--out", ev.out, "Directory for metrics.json, metrics.txt and generations");
    e->add_option("--synonyms", ev.synonyms, "METEOR synonym table");
    e->add_option("--max-len", ev.max_len, "Generation length limit")->check(CLI::PositiveNumber);

    GenerateArgs gen;
    auto add_generate_options = [&](CLI::App* sub, bool out_required) {
        sub->add_option("--checkpoint", gen.checkpoint, "Checkpoint or run directory")->required();
        sub->add_option("--scene", gen.scene, "Scene JSON or JSONL file")->required();
        sub->add_option("--index", gen.index, "Record index within a JSONL file")->capture_default_str();
        auto* o = sub->add_option("--out", gen.out, "Directory for overlays, CSV and result.json");
        if (out_required) o->required();
        sub->add_option("--max-len", gen.max_len, "Generation length limit")->check(CLI::PositiveNumber);
        sub->add_option("--upsample", gen.upsample, "nearest or bilinear")
            ->check(CLI::IsMember({"nearest", "bilinear"}))
            ->capture_default_str();
    };
    auto* g = app.add_subcommand("generate", "Generate an instruction for one scene");
    add_generate_options(g, false);
    auto* ia = app.add_subcommand("inspect-attention", "Generate and export attention maps for one scene");
    add_generate_options(ia, true);

    SynthArgs syn;
    auto* s = app.add_subcommand("synth", "Write a procedural toy dataset");
    s->add_option("--out", syn.out, "Output directory")->required();
    s->add_option("--scenes", syn.scenes, "Scene count")->check(CLI::PositiveNumber)->capture_default_str();
    s->add_option("--references", syn.references, "Sentences per scene")->check(CLI::PositiveNumber)->capture_default_str();
    s->add_option("--seed", syn.seed, "Seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForAllHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return kUsage;
    }

    if (*p) return guarded([&] { return cmd_prepare(prep); });
    if (*t) return guarded([&] { return cmd_train(tr); });
    if (*e) return guarded([&] { return cmd_evaluate(ev); });
    if (*g) return guarded([&] { return cmd_generate(gen, false); });
    if (*ia) return guarded([&] { return cmd_generate(gen, true); });
    if (*s) return guarded([&] { return cmd_synth(syn); });
    return kUsage;
}
