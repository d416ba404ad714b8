// fable: desk-scale storytelling pipeline driver.
//
// Subcommands cover the full pipeline: corpus synthesis, mock-client data
// enhancement, narrator / style training, decoding, judgment aggregation,
// rater-agreement reporting, and the named end-to-end experiments.
//
// Configuration: `--config PATH` reads dotted-key lines (`train.steps = 200`);
// FABLE_* environment variables override the file (double underscore per dot:
// FABLE_STYLE__STEPS=300 sets style.steps); `--seed INT` overrides both.
// Exit codes: 0 success, 1 failed assertion in a report, 2 error.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fable/harness.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    long long seed = -1;  // -1: not given
    std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool need_out = true) {
    cmd->add_option("--config", o.config_path, "dotted-key config file")
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "root seed; every stage derives its own stream from it");
    auto* out = cmd->add_option("--out", o.out, "output directory");
    if (need_out) out->required();
}

fable::Config effective_config(const CommonOpts& o) {
    fable::Config cfg = o.config_path.empty() ? fable::Config()
                                              : fable::Config::from_file(o.config_path);
    cfg.apply_env();
    if (o.seed >= 0) cfg.set("seed", std::to_string(o.seed));
    return cfg;
}

uint64_t root_seed(const fable::Config& cfg) {
    return static_cast<uint64_t>(cfg.get_int("seed", 1));
}

void write_json(const std::string& path, const nlohmann::ordered_json& j) {
    std::ofstream f(path);
    if (!f) throw fable::ValueError("cannot open " + path);
    f << j.dump(2) << "\n";
}

void snapshot_config(const fable::Config& cfg, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream f(dir + "/config.txt");
    if (!f) throw fable::ValueError("cannot open " + dir + "/config.txt");
    f << cfg.dump();
}

fable::NarratorConfig narrator_config_from(const fable::Config& cfg) {
    fable::NarratorConfig nc;
    nc.dim = static_cast<int>(cfg.get_int("narrator.dim", nc.dim));
    nc.heads = static_cast<int>(cfg.get_int("narrator.heads", nc.heads));
    nc.blocks = static_cast<int>(cfg.get_int("narrator.blocks", nc.blocks));
    nc.story_len = static_cast<int>(cfg.get_int("narrator.story_len", nc.story_len));
    nc.story_tokens = static_cast<int>(cfg.get_int("narrator.story_tokens", nc.story_tokens));
    nc.temperature = cfg.get_double("narrator.temperature", nc.temperature);
    nc.lambda_g = cfg.get_double("narrator.lambda_g", nc.lambda_g);
    nc.lambda_p = cfg.get_double("narrator.lambda_p", nc.lambda_p);
    return nc;
}

fable::StylePipelineConfig style_config_from(const fable::Config& cfg) {
    fable::StylePipelineConfig pc;
    pc.T = static_cast<int>(cfg.get_int("style.diffusion_steps", pc.T));
    pc.steps = static_cast<int>(cfg.get_int("style.steps", pc.steps));
    pc.batch = static_cast<int>(cfg.get_int("style.batch", pc.batch));
    pc.lr = cfg.get_double("style.lr", pc.lr);
    pc.style_prefix = static_cast<int>(cfg.get_int("style.prefix", pc.style_prefix));
    pc.dropout_p = cfg.get_double("style.dropout", pc.dropout_p);
    pc.guidance = cfg.get_double("style.guidance", pc.guidance);
    return pc;
}

int cmd_synth_data(const CommonOpts& o) {
    fable::Config cfg = effective_config(o);
    fable::SynthStoryConfig sc;
    sc.story_len = static_cast<int>(cfg.get_int("data.story_len", sc.story_len));
    sc.img = static_cast<int>(cfg.get_int("data.img", sc.img));
    sc.corpus_size = static_cast<int>(cfg.get_int("data.corpus", sc.corpus_size));
    sc.hue_jitter = cfg.get_double("data.hue_jitter", sc.hue_jitter);
    sc.seed = root_seed(cfg);
    fable::SynthDataset ds = fable::synth_styled_dataset(sc);
    snapshot_config(cfg, o.out);
    fable::write_synth_dataset(ds, o.out);
    std::printf("wrote %d sequences (%d images each) to %s\n", sc.corpus_size, sc.story_len,
                o.out.c_str());
    return 0;
}

int cmd_enhance(const CommonOpts& o) {
    fable::Config cfg = effective_config(o);
    std::string input = cfg.get_string("enhance.input");
    if (input.empty())
        throw fable::ValueError("enhance: set enhance.input to a raw-stories jsonl file");
    std::vector<fable::RawStory> raw = fable::read_raw_stories_jsonl(input);

    std::string tdir = cfg.get_string("enhance.templates", "templates");
    fable::EnhanceConfig ec;
    ec.min_words = static_cast<int>(cfg.get_int("enhance.min_words", ec.min_words));
    ec.parallelism = static_cast<int>(cfg.get_int("enhance.parallelism", ec.parallelism));
    ec.describe_template = fable::PromptTemplate::load(tdir + "/describe_v1.txt");
    ec.rewrite_template = fable::PromptTemplate::load(tdir + "/rewrite_v1.txt");
    ec.client_spec.retry_budget =
        static_cast<int>(cfg.get_int("enhance.retry_budget", ec.client_spec.retry_budget));

    snapshot_config(cfg, o.out);
    fable::TranscriptCache cache(cfg.get_string("enhance.cache", o.out + "/cache"));
    ec.cache = &cache;

    fable::MockLlmClient client(fable::derive_seed(root_seed(cfg), "mock"));
    int para_words = static_cast<int>(cfg.get_int("enhance.paragraph_words", 0));
    if (para_words > 0 && !raw.empty())
        client.set_default_paragraphs(static_cast<int>(raw.front().storyline_plots.size()),
                                      para_words);

    auto [enhanced, stats] = fable::run_enhancement(raw, client, ec);
    fable::write_enhanced_jsonl(o.out + "/enhanced.jsonl", enhanced);

    nlohmann::ordered_json rep;
    rep["total"] = stats.total;
    rep["accepted"] = stats.accepted;
    rep["retention"] = stats.retention();
    rep["published_reference_retention"] = fable::RetentionStats::published_reference_retention;
    nlohmann::ordered_json rej;
    for (const auto& [reason, n] : stats.rejected) rej[fable::to_string(reason)] = n;
    rep["rejected"] = rej;
    rep["transport_failures"] = stats.transport_failures;
    write_json(o.out + "/retention.json", rep);
    std::printf("enhanced %d/%d stories (retention %.3f) -> %s\n", stats.accepted, stats.total,
                stats.retention(), o.out.c_str());
    return 0;
}

int cmd_train_narrator(const CommonOpts& o) {
    fable::Config cfg = effective_config(o);
    std::string corpus = cfg.get_string("narrator.corpus");
    if (corpus.empty())
        throw fable::ValueError("train-narrator: set narrator.corpus to a corpus directory");
    fable::SynthDataset ds = fable::read_synth_dataset(corpus);

    uint64_t seed = root_seed(cfg);
    fable::NarratorConfig nc = narrator_config_from(cfg);
    nc.story_len = ds.cfg.story_len;
    fable::NarratorBundle b = fable::make_narrator_bundle(nc, seed);
    std::vector<fable::StorySample> samples =
        fable::to_story_samples(b.encoder, ds, b.model->vocab);

    double before = fable::narrator_corpus_loss(*b.model, samples);
    std::vector<double> losses = fable::train_narrator(
        b, samples, static_cast<int>(cfg.get_int("narrator.steps", 200)),
        static_cast<int>(cfg.get_int("narrator.batch", 6)),
        cfg.get_double("narrator.lr", 3e-3), seed);
    double after = fable::narrator_corpus_loss(*b.model, samples);

    snapshot_config(cfg, o.out);
    fable::save_checkpoint(*b.ps, o.out + "/narrator-params", seed);
    nlohmann::ordered_json rep;
    rep["steps"] = losses.size();
    rep["loss_before"] = before;
    rep["loss_after"] = after;
    rep["reduction"] = before > 0.0 ? 1.0 - after / before : 0.0;
    rep["losses"] = losses;
    write_json(o.out + "/metrics.json", rep);
    std::printf("narrator loss %.4f -> %.4f over %zu steps -> %s\n", before, after, losses.size(),
                o.out.c_str());
    return 0;
}

int cmd_train_style(const CommonOpts& o) {
    fable::Config cfg = effective_config(o);
    std::string corpus = cfg.get_string("style.corpus");
    if (corpus.empty())
        throw fable::ValueError("train-style: set style.corpus to a corpus directory");
    fable::SynthDataset ds = fable::read_synth_dataset(corpus);

    uint64_t seed = root_seed(cfg);
    fable::StylePipelineConfig pc = style_config_from(cfg);
    pc.data = ds.cfg;
    fable::StyleBundle b = fable::make_style_bundle(pc, seed);
    std::vector<double> losses = fable::train_style(b, ds, seed);

    snapshot_config(cfg, o.out);
    fable::save_checkpoint(*b.ps, o.out + "/style-params", seed);
    nlohmann::ordered_json rep;
    rep["steps"] = losses.size();
    rep["loss_first"] = losses.front();
    rep["loss_last"] = losses.back();
    rep["losses"] = losses;
    write_json(o.out + "/metrics.json", rep);
    std::printf("style loss %.4f -> %.4f over %zu steps -> %s\n", losses.front(), losses.back(),
                losses.size(), o.out.c_str());
    return 0;
}

// shared by generate and predict: load corpus + narrator checkpoint, decode,
// write one jsonl record per story (decode failures become records, not crashes)
int decode_command(const CommonOpts& o, bool predict_mode) {
    fable::Config cfg = effective_config(o);
    const char* verb = predict_mode ? "predict" : "generate";
    std::string key = predict_mode ? "predict" : "generate";
    std::string corpus = cfg.get_string(key + ".corpus");
    std::string ckpt = cfg.get_string(key + ".checkpoint");
    if (corpus.empty() || ckpt.empty())
        throw fable::ValueError(std::string(verb) + ": set " + key + ".corpus and " + key +
                                ".checkpoint");
    fable::SynthDataset ds = fable::read_synth_dataset(corpus);

    uint64_t seed = root_seed(cfg);
    fable::NarratorConfig nc = narrator_config_from(cfg);
    nc.story_len = ds.cfg.story_len;
    fable::NarratorBundle b = fable::make_narrator_bundle(nc, seed);
    fable::load_checkpoint(*b.ps, ckpt);

    int count = static_cast<int>(
        cfg.get_int(key + ".count", static_cast<long long>(ds.stories.size())));
    count = std::min<int>(count, static_cast<int>(ds.stories.size()));
    int k = static_cast<int>(cfg.get_int("predict.k", 3));

    snapshot_config(cfg, o.out);
    std::ofstream f(o.out + "/stories.jsonl");
    if (!f) throw fable::ValueError("cannot open " + o.out + "/stories.jsonl");
    int failures = 0;
    for (int i = 0; i < count; ++i) {
        const fable::SynthStory& story = ds.stories[static_cast<size_t>(i)];
        fable::StorySample s = fable::to_story_sample(b.encoder, story, b.model->vocab);
        nlohmann::ordered_json rec;
        rec["story_id"] = story.story_id;
        rec["reference"] = story.plots;
        fable::Rng rng(fable::derive_seed(seed, story.story_id));
        fable::Rng* rp = nc.temperature > 0.0 ? &rng : nullptr;
        try {
            fable::StoryPlots plots;
            if (predict_mode) {
                fable::Array prefix(fable::Shape{k, s.features.shape[1], s.features.shape[2]});
                std::copy_n(s.features.data.begin(), prefix.data.size(), prefix.data.begin());
                rec["k"] = k;
                plots = fable::predict_story(*b.model, prefix, b.model->pred_instructions[0], rp);
            } else {
                plots = fable::generate_story(*b.model, s.features, b.model->gen_instructions[0],
                                              rp);
            }
            rec["plots"] = plots.plots;
            rec["status"] = "ok";
        } catch (const fable::DecodeError& e) {
            rec["status"] = "decode-error";
            rec["message"] = e.what();
            rec["partial"] = e.partial;
            ++failures;
        }
        f << rec.dump() << "\n";
    }
    std::printf("%s: decoded %d stories (%d failures) -> %s\n", verb, count, failures,
                o.out.c_str());
    return 0;
}

int cmd_eval_aggregate(const CommonOpts& o) {
    fable::Config cfg = effective_config(o);
    std::string input = cfg.get_string("eval.input");
    if (input.empty())
        throw fable::ValueError("eval-aggregate: set eval.input to a comparisons jsonl file");
    std::vector<fable::ComparisonRecord> records = fable::read_comparisons_jsonl(input);
    for (auto& r : records) r = fable::deshuffled(r);

    auto cells = fable::aggregate_outcomes(records);
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& [key, row] : cells) {
        fable::WinPlus wp = fable::winplus_transform(fable::normalized(row));
        rows.push_back({{"method_a", key.method_a},
                        {"method_b", key.method_b},
                        {"metric", fable::to_string(key.metric)},
                        {"win", row.win},
                        {"lose", row.lose},
                        {"tie", row.tie},
                        {"win_plus", wp.win_plus},
                        {"lose_plus", wp.lose_plus}});
    }
    snapshot_config(cfg, o.out);
    nlohmann::ordered_json rep;
    rep["records"] = records.size();
    rep["cells"] = rows;
    write_json(o.out + "/aggregate.json", rep);
    std::printf("aggregated %zu records into %zu cells -> %s\n", records.size(), cells.size(),
                o.out.c_str());
    return 0;
}

int cmd_icc_report(const CommonOpts& o) {
    fable::Config cfg = effective_config(o);
    nlohmann::ordered_json rep;

    std::string input = cfg.get_string("eval.input");
    if (!input.empty()) {
        std::vector<fable::ComparisonRecord> records = fable::read_comparisons_jsonl(input);
        for (auto& r : records) r = fable::deshuffled(r);
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (const auto& [key, cell_records] : fable::group_by_cell(records)) {
            fable::RatingMatrix m = fable::encode_rating_matrix(cell_records);
            fable::ICCResult icc = fable::icc2k(m);
            rows.push_back({{"method_a", key.method_a},
                            {"method_b", key.method_b},
                            {"metric", fable::to_string(key.metric)},
                            {"subjects", m.subjects},
                            {"raters", m.raters},
                            {"icc2k", icc.value},
                            {"band", fable::to_string(fable::interpret_icc(icc.value))}});
        }
        rep["computed"] = rows;
    }

    auto fixture_rows = [](const std::vector<fable::study::IccFixtureRow>& fixture) {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (const auto& r : fixture)
            rows.push_back({{"method", r.method},
                            {"icc2k", r.icc},
                            {"band", fable::to_string(fable::interpret_icc(r.icc))}});
        return rows;
    };
    rep["published"] = {{"generation", fixture_rows(fable::study::generation_icc())},
                        {"prediction", fixture_rows(fable::study::prediction_icc())}};

    snapshot_config(cfg, o.out);
    write_json(o.out + "/icc.json", rep);
    std::printf("icc report -> %s/icc.json\n", o.out.c_str());
    return 0;
}

int cmd_run_experiment(const CommonOpts& o, const std::string& name) {
    fable::Config cfg = effective_config(o);
    nlohmann::ordered_json report = fable::run_experiment(name, cfg, o.out);
    bool pass = report.value("pass", false);
    std::printf("%s: %s (report: %s/report.json)\n", name.c_str(), pass ? "PASS" : "FAIL",
                o.out.c_str());
    return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "fable: desk-scale storytelling pipeline\n"
        "Config: --config file of dotted keys; FABLE_* env vars override the file\n"
        "(FABLE_STYLE__STEPS=300 sets style.steps); --seed overrides both."};
    app.require_subcommand(1);

    CommonOpts o;
    std::string experiment_name;

    CLI::App* synth = app.add_subcommand("synth-data", "write a synthetic styled corpus");
    add_common(synth, o);
    CLI::App* enha = app.add_subcommand("enhance", "rewrite raw stories through the mock client");
    add_common(enha, o);
    CLI::App* trn = app.add_subcommand("train-narrator", "train the story decoder on a corpus");
    add_common(trn, o);
    CLI::App* trs = app.add_subcommand("train-style", "train the conditioned denoiser + resampler");
    add_common(trs, o);
    CLI::App* gen = app.add_subcommand("generate", "decode full stories with a trained narrator");
    add_common(gen, o);
    CLI::App* prd = app.add_subcommand("predict", "decode stories from a k-image prefix");
    add_common(prd, o);
    CLI::App* agg = app.add_subcommand("eval-aggregate", "aggregate pairwise judgments");
    add_common(agg, o);
    CLI::App* icc = app.add_subcommand("icc-report", "rater-agreement report");
    add_common(icc, o);
    CLI::App* exp = app.add_subcommand("run-experiment", "run a named end-to-end experiment");
    exp->add_option("name", experiment_name,
                    "zero-adapter-equivalence | table-reproduction | style-conditioning | "
                    "full-pipeline")
        ->required();
    add_common(exp, o);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth_data(o);
        if (enha->parsed()) return cmd_enhance(o);
        if (trn->parsed()) return cmd_train_narrator(o);
        if (trs->parsed()) return cmd_train_style(o);
        if (gen->parsed()) return decode_command(o, false);
        if (prd->parsed()) return decode_command(o, true);
        if (agg->parsed()) return cmd_eval_aggregate(o);
        if (icc->parsed()) return cmd_icc_report(o);
        if (exp->parsed()) return cmd_run_experiment(o, experiment_name);
    } catch (const fable::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 2;
}
