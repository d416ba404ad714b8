#pragma once

// Pairwise human-evaluation support: rater assignment with option shuffling,
// win/lose/tie aggregation, the Win+Tie/2 collapse, and ICC(2,k)
// absolute-agreement reliability. Everything is pure over immutable inputs.

#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "fable/errors.hpp"
#include "fable/rng.hpp"

namespace fable {

enum class Metric {
    integrality,
    interestingness,
    consistency_text,
    consistency_image,
    correlation,
};

inline const char* to_string(Metric m) {
    switch (m) {
        case Metric::integrality: return "integrality";
        case Metric::interestingness: return "interestingness";
        case Metric::consistency_text: return "consistency_text";
        case Metric::consistency_image: return "consistency_image";
        case Metric::correlation: return "correlation";
    }
    return "?";
}

inline Metric metric_from_string(const std::string& s) {
    if (s == "integrality") return Metric::integrality;
    if (s == "interestingness") return Metric::interestingness;
    if (s == "consistency_text") return Metric::consistency_text;
    if (s == "consistency_image") return Metric::consistency_image;
    if (s == "correlation") return Metric::correlation;
    throw ValueError("unknown metric '" + s + "'");
}

enum class Choice { win, lose, tie };
enum class Order { AB, BA };

inline const char* to_string(Choice c) {
    return c == Choice::win ? "win" : c == Choice::lose ? "lose" : "tie";
}
inline Choice choice_from_string(const std::string& s) {
    if (s == "win") return Choice::win;
    if (s == "lose") return Choice::lose;
    if (s == "tie") return Choice::tie;
    throw ValueError("unknown choice '" + s + "'");
}
inline const char* to_string(Order o) { return o == Order::AB ? "AB" : "BA"; }
inline Order order_from_string(const std::string& s) {
    if (s == "AB") return Order::AB;
    if (s == "BA") return Order::BA;
    throw ValueError("unknown presented_order '" + s + "'");
}

// One rater judgment of method_a vs method_b on one sample and metric.
// `choice` is relative to method_a once the record is in canonical
// orientation (see deshuffled()).
struct ComparisonRecord {
    std::string sample_id;
    Metric metric = Metric::integrality;
    std::string method_a;
    std::string method_b;
    std::string rater_id;
    Order presented_order = Order::AB;
    Choice choice = Choice::tie;
};

// Undoes option shuffling: a BA presentation showed method_b first, so the
// rater's "win" refers to method_b. Flipping win<->lose restores choice
// semantics relative to method_a. Applying this twice is the identity.
inline ComparisonRecord deshuffled(ComparisonRecord r) {
    if (r.presented_order == Order::BA) {
        if (r.choice == Choice::win)
            r.choice = Choice::lose;
        else if (r.choice == Choice::lose)
            r.choice = Choice::win;
    }
    return r;
}

struct AggregateRow {
    double win = 0, lose = 0, tie = 0;
    double total() const { return win + lose + tie; }
};

// Proportion rows are expected to sum to 1; source tallies occasionally sum
// to 1.01 from rounding. Renormalize, warning when the drift is visible.
inline AggregateRow normalized(AggregateRow row, std::ostream* warn = nullptr) {
    double t = row.total();
    if (t <= 0.0) throw ValueError("normalized: row total must be positive");
    if (std::abs(t - 1.0) > 1e-9) {
        if (warn && std::abs(t - 1.0) > 1e-6)
            *warn << "warning: win/lose/tie row sums to " << t << "; renormalizing\n";
        row.win /= t;
        row.lose /= t;
        row.tie /= t;
    }
    return row;
}

struct WinPlus {
    double win_plus = 0, lose_plus = 0;
};

// Collapses three-way judgments to two numbers, splitting ties evenly.
// Unrounded; reporting layers round to two decimals.
inline WinPlus winplus_transform(const AggregateRow& row) {
    return {row.win + row.tie / 2.0, row.lose + row.tie / 2.0};
}

struct CellKey {
    std::string method_a;
    std::string method_b;
    Metric metric = Metric::integrality;
    auto operator<=>(const CellKey&) const = default;
};

// Counts canonical-orientation records into per-(pair, metric) proportion
// rows. Cells with no records are simply absent from the result.
inline std::map<CellKey, AggregateRow> aggregate_outcomes(
    const std::vector<ComparisonRecord>& records) {
    struct Counts {
        int win = 0, lose = 0, tie = 0;
    };
    std::map<CellKey, Counts> counts;
    for (const auto& r : records) {
        Counts& c = counts[{r.method_a, r.method_b, r.metric}];
        if (r.choice == Choice::win)
            ++c.win;
        else if (r.choice == Choice::lose)
            ++c.lose;
        else
            ++c.tie;
    }
    std::map<CellKey, AggregateRow> out;
    for (const auto& [k, c] : counts) {
        double n = c.win + c.lose + c.tie;
        out[k] = {c.win / n, c.lose / n, c.tie / n};
    }
    return out;
}

// ---- rater assignment ----

struct Assignment {
    std::string sample_id;
    std::string method_a;
    std::string method_b;
    std::string rater_id;
    Order presented_order = Order::AB;
};

// Gives every (sample, method pair) exactly `raters_per_comparison` judgments.
// Rater pools are disjoint across method pairs: the pool is partitioned in
// order, one slice per pair, and each rater in a slice covers every sample of
// that pair. Presentation order is drawn per assignment.
inline std::vector<Assignment> build_assignments(
    const std::vector<std::string>& sample_ids,
    const std::vector<std::pair<std::string, std::string>>& method_pairs,
    int raters_per_comparison, const std::vector<std::string>& rater_pool, uint64_t seed) {
    if (raters_per_comparison < 1)
        throw ValueError("build_assignments: raters_per_comparison must be >= 1");
    size_t need = method_pairs.size() * static_cast<size_t>(raters_per_comparison);
    if (rater_pool.size() < need)
        throw ValueError("build_assignments: rater pool of " + std::to_string(rater_pool.size()) +
                         " cannot cover " + std::to_string(need) + " disjoint slots");
    Rng rng(seed);
    std::vector<Assignment> out;
    out.reserve(sample_ids.size() * need);
    for (size_t p = 0; p < method_pairs.size(); ++p) {
        size_t base = p * static_cast<size_t>(raters_per_comparison);
        for (const auto& sid : sample_ids)
            for (int j = 0; j < raters_per_comparison; ++j)
                out.push_back({sid, method_pairs[p].first, method_pairs[p].second,
                               rater_pool[base + static_cast<size_t>(j)],
                               rng.bernoulli(0.5) ? Order::BA : Order::AB});
    }
    return out;
}

// ---- ICC(2,k) ----

struct RatingMatrix {
    int subjects = 0;
    int raters = 0;
    std::vector<double> v;  // row-major [subjects x raters]

    RatingMatrix() = default;
    RatingMatrix(int n, int r) : subjects(n), raters(r), v(static_cast<size_t>(n) * r, 0.0) {}
    double& at(int i, int j) { return v[static_cast<size_t>(i) * raters + j]; }
    double at(int i, int j) const { return v[static_cast<size_t>(i) * raters + j]; }
};

struct ChoiceEncoding {
    double win = 1.0;
    double tie = 0.5;
    double lose = 0.0;
};

// Lays records for a single (method pair, metric) cell into a subjects x
// raters grid. Subject and rater axes are ordered lexicographically so the
// matrix is reproducible regardless of record order.
inline RatingMatrix encode_rating_matrix(const std::vector<ComparisonRecord>& records,
                                         const ChoiceEncoding& enc = {}) {
    if (records.empty()) throw IncompleteDataError("encode_rating_matrix: no records");
    std::map<std::string, int> subj, rater;
    for (const auto& r : records) {
        subj.emplace(r.sample_id, 0);
        rater.emplace(r.rater_id, 0);
    }
    int i = 0;
    for (auto& [_, idx] : subj) idx = i++;
    i = 0;
    for (auto& [_, idx] : rater) idx = i++;

    RatingMatrix m(static_cast<int>(subj.size()), static_cast<int>(rater.size()));
    std::vector<char> filled(m.v.size(), 0);
    for (const auto& r : records) {
        size_t cell = static_cast<size_t>(subj[r.sample_id]) * m.raters + rater[r.rater_id];
        if (filled[cell])
            throw ValueError("encode_rating_matrix: duplicate (sample, rater) cell " +
                             r.sample_id + "/" + r.rater_id);
        filled[cell] = 1;
        m.v[cell] = r.choice == Choice::win ? enc.win
                    : r.choice == Choice::tie ? enc.tie
                                              : enc.lose;
    }
    for (size_t c = 0; c < filled.size(); ++c)
        if (!filled[c])
            throw IncompleteDataError("encode_rating_matrix: missing (sample, rater) cell");
    return m;
}

enum class IccBand { poor, moderate, good, excellent };

inline const char* to_string(IccBand b) {
    switch (b) {
        case IccBand::poor: return "poor";
        case IccBand::moderate: return "moderate";
        case IccBand::good: return "good";
        case IccBand::excellent: return "excellent";
    }
    return "?";
}

// Boundary values go to the higher band.
inline IccBand interpret_icc(double value) {
    if (!std::isfinite(value)) throw NumericError("interpret_icc: non-finite value");
    if (value >= 0.9) return IccBand::excellent;
    if (value >= 0.75) return IccBand::good;
    if (value >= 0.5) return IccBand::moderate;
    return IccBand::poor;
}

struct ICCResult {
    double value = 0.0;
    IccBand band = IccBand::poor;
    bool degenerate = false;  // no between-subject variance and no residual
};

// Two-way random effects, absolute agreement, mean of k raters:
//   ICC = (MSR - MSE) / (MSR + (MSC - MSE)/n)
// The residual mean square is accumulated directly from the interaction
// residuals x_ij - rowmean_i - colmean_j + grand.
inline ICCResult icc2k(const RatingMatrix& m) {
    int n = m.subjects, r = m.raters;
    if (n < 2 || r < 2) throw ShapeError("icc2k: need at least 2 subjects and 2 raters");
    for (double x : m.v)
        if (!std::isfinite(x)) throw NumericError("icc2k: non-finite rating");

    double grand = 0.0;
    std::vector<double> rowm(static_cast<size_t>(n), 0.0), colm(static_cast<size_t>(r), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < r; ++j) {
            double x = m.at(i, j);
            rowm[static_cast<size_t>(i)] += x;
            colm[static_cast<size_t>(j)] += x;
            grand += x;
        }
    for (auto& x : rowm) x /= r;
    for (auto& x : colm) x /= n;
    grand /= static_cast<double>(n) * r;

    double ssr = 0.0, ssc = 0.0, sse = 0.0;
    for (int i = 0; i < n; ++i) ssr += (rowm[static_cast<size_t>(i)] - grand) * (rowm[static_cast<size_t>(i)] - grand);
    ssr *= r;
    for (int j = 0; j < r; ++j) ssc += (colm[static_cast<size_t>(j)] - grand) * (colm[static_cast<size_t>(j)] - grand);
    ssc *= n;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < r; ++j) {
            double e = m.at(i, j) - rowm[static_cast<size_t>(i)] - colm[static_cast<size_t>(j)] + grand;
            sse += e * e;
        }

    double msr = ssr / (n - 1);
    double msc = ssc / (r - 1);
    double mse = sse / (static_cast<double>(n - 1) * (r - 1));

    ICCResult res;
    double denom = msr + (msc - mse) / n;
    if (msr == 0.0 && mse == 0.0 && msc == 0.0) {
        res.degenerate = true;  // constant matrix: agreement is undefined, not perfect
        res.value = 0.0;
        res.band = IccBand::poor;
        return res;
    }
    if (denom == 0.0) {
        res.degenerate = true;
        res.value = 0.0;
        res.band = IccBand::poor;
        return res;
    }
    res.value = (msr - mse) / denom;
    res.band = interpret_icc(res.value);
    return res;
}

}  // namespace fable
