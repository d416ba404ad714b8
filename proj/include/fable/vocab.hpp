#pragma once

// Tiny word-level vocabulary shared by the storyteller, the data-enhancement
// stage, and the synthetic corpus generator.

#include <string>
#include <unordered_map>
#include <vector>

#include "fable/errors.hpp"

namespace fable {

struct Vocab {
    // special ids, fixed by convention
    static constexpr int pad = 0;
    static constexpr int bos = 1;
    static constexpr int sep = 2;
    static constexpr int eos = 3;
    static constexpr int unk = 4;

    std::vector<std::string> words;
    std::unordered_map<std::string, int> index;

    int size() const { return static_cast<int>(words.size()); }

    int id(const std::string& w) const {
        auto it = index.find(w);
        return it == index.end() ? unk : it->second;
    }

    const std::string& word(int id_) const {
        if (id_ < 0 || id_ >= size()) throw IndexError("vocab id out of range: " + std::to_string(id_));
        return words[static_cast<size_t>(id_)];
    }

    // whitespace-split encoding; unknown words map to <unk>
    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) {
                ids.push_back(id(cur));
                cur.clear();
            }
        };
        for (char c : text) {
            if (c == ' ' || c == '\t' || c == '\n' || c == '\r')
                flush();
            else
                cur.push_back(c);
        }
        flush();
        return ids;
    }

    // joins word tokens with spaces; skips <pad>/<bos>, renders other specials
    // by their bracketed names so malformed streams stay inspectable
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id_ : ids) {
            if (id_ == pad || id_ == bos) continue;
            if (!out.empty()) out.push_back(' ');
            out += word(id_);
        }
        return out;
    }

    static Vocab story_vocab() {
        Vocab v;
        v.words = {
            "<pad>", "<bos>", "<sep>", "<eos>", "<unk>",
            // style hue families
            "red", "yellow", "green", "blue",
            // shape names
            "disc", "square", "hbar", "vbar", "cross",
            // ordinals used by the plot grammar
            "first", "second", "third", "fourth", "fifth",
            // instruction and filler words
            "tell", "write", "describe", "continue", "predict",
            "the", "a", "story", "of", "for", "from", "these", "this",
            "images", "scenes", "next", "plots", "sequence",
            "field", "backdrop", "on", "shows", "scene",
            "begins", "then", "appears", "remains", "panel", "frame",
            "shape", "color", "style", "hue", "tone",
            "with", "and", "still", "now", "ends", "final",
            "opens", "closes", "view", "picture", "drawn",
        };
        for (int i = 0; i < static_cast<int>(v.words.size()); ++i)
            v.index.emplace(v.words[static_cast<size_t>(i)], i);
        return v;
    }
};

}  // namespace fable
