#pragma once

// Story data auto-enhancement: per-image detailed descriptions and a
// storyline-preserving rewrite through an LLM client, followed by strict
// validation that drops illegal candidates. Client traffic can be cached to
// disk so a re-run replays from transcripts without any client calls.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fable/errors.hpp"
#include "fable/rng.hpp"

namespace fable {

// ---------------------------------------------------------------------------
// domain types

struct RawStory {
    std::string story_id;
    std::vector<std::string> image_refs;
    std::vector<std::string> storyline_plots;  // aligned with image_refs
};

struct DescriptionSet {
    std::string story_id;
    std::vector<std::string> descriptions;
};

enum class RejectReason { wrong_paragraph_count, too_short, bad_order, empty };

inline const char* to_string(RejectReason r) {
    switch (r) {
        case RejectReason::wrong_paragraph_count: return "wrong_paragraph_count";
        case RejectReason::too_short: return "too_short";
        case RejectReason::bad_order: return "bad_order";
        case RejectReason::empty: return "empty";
    }
    return "?";
}

struct EnhancedStory {
    std::string story_id;
    std::vector<std::string> plots;  // exactly N paragraphs in image order
    std::string description_prompt_id, rewrite_prompt_id, client_id;
    std::vector<int> word_counts;
};

// ---------------------------------------------------------------------------
// prompt templates: versioned text files with {name} placeholders

struct PromptTemplate {
    std::string id;
    std::string text;

    static PromptTemplate load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ValueError("template not readable: " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        return {std::filesystem::path(path).stem().string(), buf.str()};
    }

    std::string render(const std::vector<std::pair<std::string, std::string>>& subs) const {
        std::string out = text;
        for (const auto& [key, value] : subs) {
            std::string tag = "{" + key + "}";
            size_t pos = 0;
            while ((pos = out.find(tag, pos)) != std::string::npos) {
                out.replace(pos, tag.size(), value);
                pos += value.size();
            }
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// LLM client abstraction

struct LlmRequest {
    std::string stage;  // "describe" | "rewrite"
    std::string story_id;
    int image_index = -1;  // -1 for story-level requests
    std::string template_id;
    std::string prompt;
};

struct LlmClientSpec {
    std::string client_id = "mock-v1";
    int retry_budget = 2;  // extra attempts after the first
    int timeout_ms = 10000;
};

class LlmClient {
public:
    virtual ~LlmClient() = default;
    virtual std::string complete(const LlmRequest& req) = 0;
    virtual std::string id() const = 0;
};

// Deterministic stand-in for a hosted model. Responses come from, in order:
// scripted exact responses, canned per-image descriptions, or seeded synthesis
// that depends only on the request key (stable under concurrent call order).
class MockLlmClient : public LlmClient {
public:
    explicit MockLlmClient(uint64_t seed = 0, std::string id = "mock-v1")
        : seed_(seed), id_(std::move(id)) {}

    std::string id() const override { return id_; }

    void script(const std::string& stage, const std::string& story_id, int image_index,
                std::string response) {
        scripted_[key(stage, story_id, image_index)] = std::move(response);
    }
    void canned_description(const std::string& image_ref, std::string text) {
        canned_[image_ref] = std::move(text);
    }
    void set_unreachable(bool v) { unreachable_ = v; }
    void set_default_paragraphs(int n, int words_each) {
        default_n_ = n;
        default_words_ = words_each;
    }
    int attempts() const { return attempts_.load(); }

    std::string complete(const LlmRequest& req) override {
        attempts_.fetch_add(1);
        if (unreachable_) throw TransportError("endpoint unreachable");
        {
            std::lock_guard<std::mutex> lock(mu_);
            auto it = scripted_.find(key(req.stage, req.story_id, req.image_index));
            if (it != scripted_.end()) return it->second;
        }
        if (req.stage == "describe") {
            {
                std::lock_guard<std::mutex> lock(mu_);
                // canned table lookup by the ref embedded in the prompt
                for (const auto& [ref, text] : canned_)
                    if (req.prompt.find(ref) != std::string::npos) return text;
            }
            return synth_description(req);
        }
        return synth_rewrite(req);
    }

private:
    static std::string key(const std::string& stage, const std::string& story_id, int image_index) {
        return stage + "\x1f" + story_id + "\x1f" + std::to_string(image_index);
    }

    std::string synth_description(const LlmRequest& req) const {
        static const char* kAdj[] = {"quiet", "vivid", "weathered", "sunlit", "narrow", "open"};
        static const char* kNoun[] = {"courtyard", "shoreline", "workshop", "market", "meadow", "hall"};
        Rng rng(derive_seed(seed_, key(req.stage, req.story_id, req.image_index)));
        std::ostringstream out;
        out << "A detailed view of image " << req.image_index << " from story " << req.story_id
            << ": a " << kAdj[rng.uniform_int(0, 5)] << " " << kNoun[rng.uniform_int(0, 5)]
            << " rendered with " << kAdj[rng.uniform_int(0, 5)] << " light and "
            << kAdj[rng.uniform_int(0, 5)] << " detail.";
        return out.str();
    }

    std::string synth_rewrite(const LlmRequest& req) const {
        Rng rng(derive_seed(seed_, key(req.stage, req.story_id, req.image_index)));
        static const char* kWord[] = {"slowly", "brightly", "together", "beyond", "gently",
                                      "steadily", "quietly", "warmly"};
        std::ostringstream out;
        for (int p = 1; p <= default_n_; ++p) {
            if (p > 1) out << "\n\n";
            out << "Paragraph " << p << ": the scene unfolds";
            for (int w = 0; w < default_words_ - 4; ++w) out << ' ' << kWord[rng.uniform_int(0, 7)];
            out << '.';
        }
        return out.str();
    }

    uint64_t seed_;
    std::string id_;
    bool unreachable_ = false;
    int default_n_ = 5;
    int default_words_ = 48;
    std::map<std::string, std::string> scripted_;
    std::map<std::string, std::string> canned_;
    std::atomic<int> attempts_{0};
    mutable std::mutex mu_;
};

// ---------------------------------------------------------------------------
// transcript cache: one JSON file per request, so external-model stages can
// be replayed without any client traffic

class TranscriptCache {
public:
    explicit TranscriptCache(std::string dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    static uint64_t request_hash(const LlmRequest& req) {
        std::string blob = req.stage + "\x1f" + req.story_id + "\x1f" +
                           std::to_string(req.image_index) + "\x1f" + req.template_id + "\x1f" +
                           req.prompt;
        // FNV-1a
        uint64_t h = 1469598103934665603ull;
        for (unsigned char c : blob) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

    std::optional<std::string> lookup(const LlmRequest& req) const {
        std::lock_guard<std::mutex> lock(mu_);
        std::ifstream in(path_for(req), std::ios::binary);
        if (!in) return std::nullopt;
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.contains("response"))
            throw ContentError("corrupt transcript: " + path_for(req));
        return j["response"].get<std::string>();
    }

    void store(const LlmRequest& req, const std::string& response) {
        std::lock_guard<std::mutex> lock(mu_);
        std::string p = path_for(req);
        if (std::filesystem::exists(p)) return;  // first write wins; replays never rewrite
        nlohmann::ordered_json j;
        char hex[17];
        std::snprintf(hex, sizeof hex, "%016llx",
                      static_cast<unsigned long long>(request_hash(req)));
        j["request_hash"] = hex;
        j["stage"] = req.stage;
        j["story_id"] = req.story_id;
        j["image_index"] = req.image_index;
        j["template_id"] = req.template_id;
        j["prompt"] = req.prompt;
        j["response"] = response;
        j["timestamp"] = seq_.fetch_add(1);  // logical clock keeps transcripts reproducible
        std::ofstream out(p, std::ios::binary);
        out << j.dump(2) << '\n';
    }

    const std::string& dir() const { return dir_; }

private:
    std::string path_for(const LlmRequest& req) const {
        char hex[17];
        std::snprintf(hex, sizeof hex, "%016llx",
                      static_cast<unsigned long long>(request_hash(req)));
        return dir_ + "/" + hex + ".json";
    }

    std::string dir_;
    std::atomic<long> seq_{0};
    mutable std::mutex mu_;
};

// ---------------------------------------------------------------------------
// client call with cache + retry

namespace detail {

inline std::string call_with_cache(LlmClient& client, const LlmClientSpec& spec,
                                   const LlmRequest& req, TranscriptCache* cache,
                                   bool* was_cached = nullptr) {
    if (cache) {
        if (auto hit = cache->lookup(req)) {
            if (was_cached) *was_cached = true;
            return *hit;
        }
    }
    if (was_cached) *was_cached = false;
    std::string response;
    int attempts = spec.retry_budget + 1;
    for (int a = 0; a < attempts; ++a) {
        try {
            response = client.complete(req);
            break;
        } catch (const TransportError&) {
            if (a + 1 == attempts) throw;
        }
    }
    if (response.find_first_not_of(" \t\r\n") == std::string::npos)
        throw ContentError("empty response for " + req.stage + "/" + req.story_id);
    if (cache) cache->store(req, response);
    return response;
}

}  // namespace detail

// one per-image detailed description
inline std::string describe_image(LlmClient& client, const LlmClientSpec& spec,
                                  const std::string& image_ref, const PromptTemplate& tmpl,
                                  const std::string& story_id, int image_index,
                                  TranscriptCache* cache = nullptr) {
    LlmRequest req{"describe", story_id, image_index, tmpl.id,
                   tmpl.render({{"image_ref", image_ref}})};
    return detail::call_with_cache(client, spec, req, cache);
}

// storyline-preserving rewrite; returns the raw candidate, unvalidated
inline std::string rewrite_story(LlmClient& client, const LlmClientSpec& spec,
                                 const std::vector<std::string>& storyline_plots,
                                 const std::vector<std::string>& descriptions,
                                 const PromptTemplate& tmpl, const std::string& story_id,
                                 TranscriptCache* cache = nullptr) {
    if (storyline_plots.size() != descriptions.size() || storyline_plots.empty())
        throw ValueError("rewrite_story: plots and descriptions must align");
    auto numbered = [](const std::vector<std::string>& xs) {
        std::string out;
        for (size_t i = 0; i < xs.size(); ++i)
            out += std::to_string(i + 1) + ". " + xs[i] + (i + 1 < xs.size() ? "\n" : "");
        return out;
    };
    LlmRequest req{"rewrite", story_id, -1, tmpl.id,
                   tmpl.render({{"storyline", numbered(storyline_plots)},
                                {"descriptions", numbered(descriptions)},
                                {"N", std::to_string(storyline_plots.size())}})};
    return detail::call_with_cache(client, spec, req, cache);
}

// ---------------------------------------------------------------------------
// validation

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

// leading "Paragraph <k>:" marker, if any; returns k or -1, and strips it
inline int take_marker(std::string& paragraph) {
    const std::string tag = "Paragraph ";
    if (paragraph.rfind(tag, 0) != 0) return -1;
    size_t i = tag.size(), start = i;
    while (i < paragraph.size() && std::isdigit(static_cast<unsigned char>(paragraph[i]))) ++i;
    if (i == start || i >= paragraph.size() || paragraph[i] != ':') return -1;
    int k = std::stoi(paragraph.substr(start, i - start));
    paragraph = trim(paragraph.substr(i + 1));
    return k;
}

inline int count_words(const std::string& s) {
    int n = 0;
    bool in = false;
    for (char c : s) {
        bool ws = c == ' ' || c == '\t' || c == '\r' || c == '\n';
        if (!ws && !in) ++n;
        in = !ws;
    }
    return n;
}

// blank-line split with a numbered-marker fallback for unformatted output
inline std::vector<std::string> split_paragraphs(const std::string& text) {
    std::vector<std::string> blocks;
    std::string cur;
    std::istringstream in(text);
    std::string line;
    auto flush = [&] {
        std::string t = trim(cur);
        if (!t.empty()) blocks.push_back(t);
        cur.clear();
    };
    while (std::getline(in, line)) {
        if (trim(line).empty())
            flush();
        else
            cur += (cur.empty() ? "" : "\n") + line;
    }
    flush();

    if (blocks.size() <= 1) {
        // fallback: split on "Paragraph <k>:" markers
        std::string flat = blocks.empty() ? "" : blocks[0];
        std::vector<size_t> cuts;
        const std::string tag = "Paragraph ";
        for (size_t pos = flat.find(tag); pos != std::string::npos; pos = flat.find(tag, pos + 1)) {
            size_t i = pos + tag.size(), start = i;
            while (i < flat.size() && std::isdigit(static_cast<unsigned char>(flat[i]))) ++i;
            if (i > start && i < flat.size() && flat[i] == ':') cuts.push_back(pos);
        }
        if (cuts.size() >= 2) {
            blocks.clear();
            for (size_t c = 0; c < cuts.size(); ++c) {
                size_t end = c + 1 < cuts.size() ? cuts[c + 1] : flat.size();
                blocks.push_back(trim(flat.substr(cuts[c], end - cuts[c])));
            }
        }
    }
    return blocks;
}

}  // namespace detail

struct CandidateCheck {
    bool accepted = false;
    std::vector<std::string> plots;       // marker-stripped paragraph texts
    std::vector<int> word_counts;         // counted after marker stripping
    RejectReason reason = RejectReason::empty;
};

// Accept iff the candidate splits into exactly N paragraphs, every paragraph
// has at least min_words words, and numbered markers (when present) increase
// strictly. Rejection names the first failed predicate, checked in the fixed
// order count -> length -> order.
inline CandidateCheck validate_candidate(const std::string& candidate, int n, int min_words = 40) {
    if (n < 1) throw ValueError("validate_candidate: N must be >= 1");
    CandidateCheck out;
    std::vector<std::string> paragraphs = detail::split_paragraphs(candidate);
    if (paragraphs.empty()) {
        out.reason = RejectReason::empty;
        return out;
    }
    if (static_cast<int>(paragraphs.size()) != n) {
        out.reason = RejectReason::wrong_paragraph_count;
        return out;
    }
    std::vector<int> markers;
    for (auto& p : paragraphs) markers.push_back(detail::take_marker(p));
    std::vector<int> counts;
    for (const auto& p : paragraphs) counts.push_back(detail::count_words(p));
    for (int c : counts)
        if (c < min_words) {
            out.reason = RejectReason::too_short;
            return out;
        }
    int prev = 0;
    for (int m : markers) {
        if (m < 0) continue;  // unmarked paragraphs impose no ordering constraint
        if (m <= prev) {
            out.reason = RejectReason::bad_order;
            return out;
        }
        prev = m;
    }
    out.accepted = true;
    out.plots = std::move(paragraphs);
    out.word_counts = std::move(counts);
    return out;
}

// ---------------------------------------------------------------------------
// batch pipeline

struct EnhanceConfig {
    int min_words = 40;
    int parallelism = 1;  // bounded worker count for client calls
    PromptTemplate describe_template;
    PromptTemplate rewrite_template;
    LlmClientSpec client_spec;
    TranscriptCache* cache = nullptr;
};

struct StoryRecord {
    RawStory raw;
    std::vector<std::string> descriptions;
    std::vector<std::string> enhanced_plots;
    std::vector<int> word_counts;
    std::string status;  // "accepted" | "rejected" | "failed"
    std::optional<RejectReason> reject_reason;
    std::string error;
};

struct EnhancedDataset {
    std::vector<StoryRecord> records;  // input order, regardless of completion order
};

struct RetentionStats {
    int total = 0;
    int accepted = 0;
    std::map<RejectReason, int> rejected;
    int transport_failures = 0;
    // the published pipeline kept 16k of 40k source stories; recorded for
    // comparison in reports, not something the mock stages reproduce
    static constexpr double published_reference_retention = 0.4;

    double retention() const { return total == 0 ? 0.0 : static_cast<double>(accepted) / total; }
};

inline std::pair<EnhancedDataset, RetentionStats> run_enhancement(
    const std::vector<RawStory>& dataset, LlmClient& client, const EnhanceConfig& cfg) {
    if (dataset.empty()) throw ValueError("run_enhancement: empty dataset");
    for (const auto& s : dataset)
        if (s.image_refs.size() != s.storyline_plots.size() || s.image_refs.empty())
            throw ValueError("run_enhancement: misaligned story " + s.story_id);

    EnhancedDataset out;
    out.records.resize(dataset.size());

    // workers pull stories by index and fill their own slot, so output order
    // is input order no matter how calls interleave
    std::atomic<size_t> next{0};
    auto work = [&] {
        for (size_t i = next.fetch_add(1); i < dataset.size(); i = next.fetch_add(1)) {
            const RawStory& raw = dataset[i];
            StoryRecord& rec = out.records[i];
            rec.raw = raw;
            try {
                int n = static_cast<int>(raw.image_refs.size());
                for (int j = 0; j < n; ++j)
                    rec.descriptions.push_back(describe_image(client, cfg.client_spec,
                                                              raw.image_refs[static_cast<size_t>(j)],
                                                              cfg.describe_template, raw.story_id, j,
                                                              cfg.cache));
                std::string candidate =
                    rewrite_story(client, cfg.client_spec, raw.storyline_plots, rec.descriptions,
                                  cfg.rewrite_template, raw.story_id, cfg.cache);
                CandidateCheck check = validate_candidate(candidate, n, cfg.min_words);
                if (check.accepted) {
                    rec.status = "accepted";
                    rec.enhanced_plots = std::move(check.plots);
                    rec.word_counts = std::move(check.word_counts);
                } else {
                    rec.status = "rejected";
                    rec.reject_reason = check.reason;
                }
            } catch (const Error& e) {
                rec.status = "failed";
                rec.error = e.what();
            }
        }
    };

    int workers = std::max(1, cfg.parallelism);
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }

    RetentionStats stats;
    stats.total = static_cast<int>(dataset.size());
    for (const auto& rec : out.records) {
        if (rec.status == "accepted")
            stats.accepted++;
        else if (rec.status == "rejected")
            stats.rejected[*rec.reject_reason]++;
        else
            stats.transport_failures++;
    }
    return {std::move(out), stats};
}

// ---------------------------------------------------------------------------
// JSON-lines persistence: one object per story

inline nlohmann::ordered_json record_to_json(const StoryRecord& rec) {
    nlohmann::ordered_json j;
    j["story_id"] = rec.raw.story_id;
    j["image_refs"] = rec.raw.image_refs;
    j["storyline_plots"] = rec.raw.storyline_plots;
    j["descriptions"] = rec.descriptions;
    j["enhanced_plots"] = rec.enhanced_plots;
    j["status"] = rec.status;
    j["reject_reason"] = rec.reject_reason ? to_string(*rec.reject_reason) : "";
    return j;
}

inline void write_enhanced_jsonl(const std::string& path, const EnhancedDataset& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValueError("cannot write " + path);
    for (const auto& rec : data.records) out << record_to_json(rec).dump() << '\n';
}

inline std::vector<RawStory> read_raw_stories_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValueError("cannot read " + path);
    std::vector<RawStory> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw ContentError(path + ":" + std::to_string(lineno) + ": bad JSON record");
        RawStory s;
        s.story_id = j.at("story_id").get<std::string>();
        s.image_refs = j.at("image_refs").get<std::vector<std::string>>();
        s.storyline_plots = j.at("storyline_plots").get<std::vector<std::string>>();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace fable
