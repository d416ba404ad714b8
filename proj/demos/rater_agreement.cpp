// Walkthrough of the evaluation-side tooling: synthesize pairwise judgments
// with a known quality gap and rater noise, undo presentation shuffling,
// aggregate to Win/Tie/Lose and Win+Tie/2 shares, then score inter-rater
// agreement with ICC(2,k).

#include <cstdio>

#include "fable/evalstats.hpp"
#include "fable/rng.hpp"

using namespace fable;

int main() {
    Rng rng(42);
    const int samples = 40;
    const char* raters[] = {"r1", "r2", "r3"};
    const Metric metric = Metric::consistency_image;

    // "ours" genuinely wins 60% of samples; raters misread 10% of judgments
    std::vector<ComparisonRecord> records;
    for (int s = 0; s < samples; ++s) {
        Choice truth = rng.uniform(0.0, 1.0) < 0.6    ? Choice::win
                       : rng.uniform(0.0, 1.0) < 0.5 ? Choice::tie
                                                      : Choice::lose;
        for (const char* rater : raters) {
            Choice seen = truth;
            if (rng.uniform(0.0, 1.0) < 0.1)
                seen = truth == Choice::win ? Choice::tie : Choice::win;
            Order order = rng.uniform(0.0, 1.0) < 0.5 ? Order::AB : Order::BA;
            // a BA presentation records the rater's choice from the flipped view
            Choice recorded = seen;
            if (order == Order::BA)
                recorded = seen == Choice::win    ? Choice::lose
                           : seen == Choice::lose ? Choice::win
                                                  : Choice::tie;
            records.push_back({"sample-" + std::to_string(s), metric, "ours", "baseline", rater,
                               order, recorded});
        }
    }

    std::vector<ComparisonRecord> canonical;
    for (const auto& r : records) canonical.push_back(deshuffled(r));
    AggregateRow row = aggregate_outcomes(canonical).at({"ours", "baseline", metric});
    std::printf("%zu judgments over %d samples, ours vs baseline (%s)\n", records.size(),
                samples, to_string(metric));
    std::printf("  win %.3f  tie %.3f  lose %.3f\n", row.win, row.tie, row.lose);
    WinPlus wp = winplus_transform(normalized(row));
    std::printf("  folded shares: win+ %.2f  lose+ %.2f\n", wp.win_plus, wp.lose_plus);

    RatingMatrix m = encode_rating_matrix(canonical, ChoiceEncoding{});
    ICCResult icc = icc2k(m);
    std::printf("agreement: ICC(2,%d) = %.3f over %d subjects -> %s%s\n", m.raters, icc.value,
                m.subjects, to_string(icc.band), icc.degenerate ? " (degenerate)" : "");
    return 0;
}
