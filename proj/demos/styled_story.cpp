// Minimal end-to-end walkthrough: build a small styled corpus, train the
// narrator and the style-conditioned denoiser briefly, then decode a story
// and sample one continuation image with and without the style latent.
//
// Artifacts land in ./demo-out (pass a different directory as argv[1]).
// Training budgets here favor speed over quality; see the run-experiment
// CLI subcommand for the full-scale settings.

#include <cstdio>
#include <filesystem>

#include "fable/harness.hpp"

using namespace fable;

int main(int argc, char** argv) {
    std::string out = argc > 1 ? argv[1] : "demo-out";
    std::filesystem::create_directories(out);
    uint64_t seed = 7;

    SynthStoryConfig sc;
    sc.corpus_size = 10;
    sc.seed = seed;
    SynthDataset ds = synth_styled_dataset(sc);
    write_synth_dataset(ds, out + "/corpus");
    std::printf("corpus: %zu sequences of %d images, saved to %s/corpus\n", ds.stories.size(),
                sc.story_len, out.c_str());

    // --- narrator: images in, plots out ---
    NarratorConfig nc;
    NarratorBundle nb = make_narrator_bundle(nc, seed);
    std::vector<StorySample> samples = to_story_samples(nb.encoder, ds, nb.model->vocab);
    double before = narrator_corpus_loss(*nb.model, samples);
    train_narrator(nb, samples, 120, 6, 3e-3, seed);
    double after = narrator_corpus_loss(*nb.model, samples);
    std::printf("narrator: corpus loss %.3f -> %.3f after 120 steps\n", before, after);

    const SynthStory& story = ds.stories[0];
    StorySample s = to_story_samples(nb.encoder, ds, nb.model->vocab)[0];
    try {
        StoryPlots gen = generate_story(*nb.model, s.features, nb.model->gen_instructions[0]);
        std::printf("story %s, decoded vs reference:\n", story.story_id.c_str());
        for (size_t i = 0; i < gen.plots.size(); ++i)
            std::printf("  %zu. %-22s (ref: %s)\n", i + 1, gen.plots[i].c_str(),
                        story.plots[i].c_str());
    } catch (const DecodeError& e) {
        std::printf("story %s decoded malformed at this budget: %s\n", story.story_id.c_str(),
                    e.what());
    }

    // --- style: denoiser + resampler conditioned on the first three images ---
    StylePipelineConfig pc;
    pc.data = sc;
    pc.steps = 400;
    pc.T = 20;
    StyleBundle sb = make_style_bundle(pc, seed);
    std::vector<double> losses = train_style(sb, ds, seed);
    std::printf("style: diffusion loss %.3f -> %.3f after %d joint steps\n", losses.front(),
                losses.back(), pc.steps);

    std::vector<Image> prefix(story.images.begin(), story.images.begin() + pc.style_prefix);
    Array style = sb.sq->encode(style_input(sb.enc, prefix));
    int i = pc.style_prefix;  // first image after the style prefix
    Array text = sb.txt->encode(content_text_ids(sb.vocab, story.plots[static_cast<size_t>(i)]));
    uint64_t s_i = derive_seed(seed, "demo-sample");
    Array with = guided_sample_image(*sb.dn, sb.sch, text, style, pc.guidance, s_i);
    Array without = sample_image(*sb.dn, sb.sch, Conditioning{text, std::nullopt}, s_i);

    write_ppm(image_from_chw(with), out + "/styled.ppm");
    write_ppm(image_from_chw(without), out + "/unstyled.ppm");
    double err_with = style_error({image_from_chw(with)}, story.hue);
    double err_without = style_error({image_from_chw(without)}, story.hue);
    std::printf("sampled plot \"%s\": hue error %.3f styled vs %.3f unstyled\n",
                story.plots[static_cast<size_t>(i)].c_str(), err_with, err_without);
    std::printf("rasters: %s/styled.ppm, %s/unstyled.ppm\n", out.c_str(), out.c_str());
    return 0;
}
