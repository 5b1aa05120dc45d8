#include "sdtp/corpus.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace sdtp {

Corpus load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    std::string raw = ss.str();
    Corpus c;
    if (path.size() > 6 && path.substr(path.size() - 6) == ".jsonl") {
        std::istringstream lines(raw);
        std::string line;
        std::string joined;
        while (std::getline(lines, line)) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line);
            if (!j.contains("text"))
                throw std::runtime_error("corpus: jsonl line without a \"text\" field");
            joined += j.at("text").get<std::string>();
            joined += '\n';
        }
        c.bytes.assign(joined.begin(), joined.end());
    } else {
        c.bytes.assign(raw.begin(), raw.end());
    }
    if (c.bytes.empty()) throw std::runtime_error("corpus: '" + path + "' is empty");
    return c;
}

std::vector<size_t> window_offsets(const Corpus& corpus, int window, int stride) {
    if (window < 1) throw std::invalid_argument("window_offsets: window must be >= 1");
    if (stride <= 0) stride = window;
    std::vector<size_t> out;
    // +1: every window needs a lookahead byte for the final label
    if (corpus.size() < static_cast<size_t>(window) + 1) return out;
    for (size_t off = 0; off + window + 1 <= corpus.size(); off += stride) out.push_back(off);
    return out;
}

Window make_window(const Corpus& corpus, size_t offset, int window) {
    if (offset + window + 1 > corpus.size())
        throw std::invalid_argument("make_window: window exceeds corpus");
    Window w;
    w.tokens.resize(window);
    w.labels.resize(window);
    for (int i = 0; i < window; i++) {
        w.tokens[i] = corpus.bytes[offset + i];
        w.labels[i] = corpus.bytes[offset + i + 1];
    }
    return w;
}

namespace {

const char* kSubjects[] = {"the miller", "a courier",  "the archivist", "one engineer",
                           "the gardener", "a surveyor", "the printer",  "an old pilot"};
const char* kVerbs[] = {"records", "carries", "repairs", "measures",
                        "collects", "signals", "inspects", "delivers"};
const char* kObjects[] = {"the ledger",   "a worn map",    "the north gate", "fresh samples",
                          "the telegraph", "spare fittings", "the manifest",  "sealed crates"};
const char* kPlaces[] = {"by the river", "near the depot",   "at dawn",       "after the storm",
                         "in the cellar", "along the ridge", "before midday", "under the bridge"};
const char* kFiller[] = {"as usual", "without delay", "again and again", "for the record",
                         "in quiet order", "with great care"};

}  // namespace

std::string synth_corpus(size_t n_bytes, uint64_t seed) {
    Rng rng(seed);
    std::string out;
    out.reserve(n_bytes + 128);
    uint64_t record_id = 1000 + rng.below(9000);
    while (out.size() < n_bytes) {
        double roll = rng.uniform();
        if (roll < 0.15) {
            // informative key=value record line
            record_id += 1 + rng.below(17);
            out += "log ";
            out += std::to_string(record_id);
            out += ": value=";
            out += std::to_string(rng.below(997));
            out += " grade=";
            out += static_cast<char>('A' + rng.below(6));
            out += ";\n";
        } else {
            out += kSubjects[rng.below(8)];
            out += ' ';
            out += kVerbs[rng.below(8)];
            out += ' ';
            out += kObjects[rng.below(8)];
            out += ' ';
            out += kPlaces[rng.below(8)];
            if (rng.uniform() < 0.4) {
                out += ", ";
                out += kFiller[rng.below(6)];
            }
            out += ".\n";
        }
    }
    out.resize(n_bytes);
    return out;
}

}  // namespace sdtp
