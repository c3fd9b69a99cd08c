#include "plm/synthetic.hpp"

#include <algorithm>
#include <array>
#include <numeric>

#include "plm/error.hpp"
#include "plm/rng.hpp"

namespace plm {

namespace {

struct Template {
    const char* a;
    const char* b;
};

// Slots: {N} subject name, {P} place, {Y} year, {C} count, {F} field,
// {T} thing, {A} adjective, {Q} second place.
constexpr std::array<Template, 32> kTemplates{{
    {"{N} was born in {P} in {Y}.", "{N} came into the world at {P} in {Y}."},
    {"{N} studied {F} at the university of {Q}.", "At the university of {Q}, {N} read {F}."},
    {"The {A} {T} of {P} is famous.", "{P} is well known for its {A} {T}."},
    {"In {Y}, {N} moved to {Q}.", "{N} relocated to {Q} in {Y}."},
    {"The population of {P} grew to {C} people.", "{P} had a population of {C} residents."},
    {"{N} wrote a long book about the {T}.", "A long book on the {T} was written by {N}."},
    {"Every spring the river near {P} floods the fields.", "The fields by {P} flood when the river rises in spring."},
    {"{N} received an award for work on {F}.", "For work on {F}, {N} won a national award."},
    {"Critics praised the {A} style of {N}.", "Reviewers admired how {A} the work of {N} was."},
    {"The old {T} in {P} was rebuilt in {Y}.", "In {Y} the town of {P} rebuilt its old {T}."},
    {"Today {P} is a center of {F}.", "{P} has become a hub for {F} research."},
    {"{N} married a teacher from {Q}.", "A teacher from {Q} became the spouse of {N}."},
    {"During the war, {N} served as a medic.", "{N} worked as a field medic during the war."},
    {"Trade in {T} made {P} rich.", "{P} grew wealthy from the trade in {T}."},
    {"The museum of {P} holds {C} objects.", "Over {C} objects are kept in the museum of {P}."},
    {"{N} died in {Q} in {Y}.", "In {Y}, {N} passed away in {Q}."},
    {"Farmers near {P} grow {A} {T}.", "The farms around {P} produce {A} {T}."},
    {"A railway reached {P} in {Y}.", "The first train arrived in {P} in {Y}."},
    {"{N} taught {F} for {C} days.", "For {C} days, {N} gave lessons in {F}."},
    {"Many tourists visit {P} each summer.", "Each summer crowds of visitors come to {P}."},
    {"The climate of {P} is {A} and dry.", "{P} has a dry and {A} climate."},
    {"{N} founded a school of {F}.", "A school devoted to {F} was started by {N}."},
    {"The mayor of {P} opened a new {T}.", "A new {T} was opened by the mayor of {P}."},
    {"Scholars still debate the ideas of {N}.", "The ideas of {N} remain a topic of debate."},
    {"An earthquake struck {Q} in {Y}.", "In {Y} a strong earthquake hit {Q}."},
    {"{N} travelled across the sea to {Q}.", "Crossing the sea, {N} sailed to {Q}."},
    {"Local legend says a {A} {T} lives in the hills.", "People say the hills hide a {A} {T}."},
    {"The language spoken in {P} is related to {F}.", "Speech in {P} shares roots with {F}."},
    {"{N} painted {C} portraits of friends.", "Friends of {N} sat for {C} portraits."},
    {"The castle above {P} dates from {Y}.", "Built in {Y}, the castle looks down on {P}."},
    {"Students from {Q} came to hear {N} speak.", "{N} drew students from {Q} to every talk."},
    {"The festival of {T} is held in {P} every year.", "Each year {P} celebrates a festival of {T}."},
}};

constexpr std::array<const char*, 16> kNames{
    "Anna Berg", "Tomas Vale", "Mira Olsen", "Karl Hurst", "Lena Marsh", "Piet Jansen", "Sara Quill", "Ivo Petrov",
    "Nora Lind", "Felix Dorn", "Ada Moreau", "Jon Reyes", "Elsa Kroll", "Marc Tiber", "Rosa Fenn", "Hugo Stam"};
constexpr std::array<const char*, 16> kPlaces{
    "Aldmoor", "Brevik", "Castelon", "Dunmere", "Eastwick", "Fjordholm", "Galway Cross", "Hollin",
    "Istra", "Juniper Bay", "Kellford", "Lorne", "Marrow Hill", "Northgate", "Oakhaven", "Pellas"};
constexpr std::array<const char*, 12> kFields{"botany",   "geology", "music",     "law",       "medicine", "poetry",
                                              "astronomy", "history", "chemistry", "economics", "theology", "optics"};
constexpr std::array<const char*, 12> kThings{"bridge", "cheese",  "glass",  "wine",   "harbor", "cathedral",
                                              "wool",   "lantern", "garden", "barley", "market", "clock"};
constexpr std::array<const char*, 10> kAdjectives{"bright", "ancient", "quiet", "golden", "bitter",
                                                  "gentle", "grand",   "rare",  "humble", "wild"};

template <std::size_t N>
const char* pick(const std::array<const char*, N>& words, Rng& rng) {
    return words[rng.below(N)];
}

std::string render(const char* pattern, const std::string& name, const std::string& place, Rng& rng) {
    std::string out;
    for (const char* p = pattern; *p; ++p) {
        if (*p == '{' && p[1] && p[2] == '}') {
            switch (p[1]) {
                case 'N': out += name; break;
                case 'P': out += place; break;
                case 'Q': out += pick(kPlaces, rng); break;
                case 'Y': out += std::to_string(1700 + rng.below(300)); break;
                case 'C': out += std::to_string(10 + rng.below(990)); break;
                case 'F': out += pick(kFields, rng); break;
                case 'T': out += pick(kThings, rng); break;
                case 'A': out += pick(kAdjectives, rng); break;
                default: out.append(p, 3); break;
            }
            p += 2;
        } else {
            out.push_back(*p);
        }
    }
    return out;
}

// Branch probabilities for `branching` successors, decreasing and summing to 1.
std::vector<double> branch_profile(std::size_t branching) {
    std::vector<double> w(branching);
    for (std::size_t i = 0; i < branching; ++i) {
        w[i] = 1.0 / static_cast<double>(i + 2);
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& x : w) {
        x /= total;
    }
    return w;
}

std::size_t sample(const std::vector<double>& probs, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) {
            return i;
        }
    }
    return probs.size() - 1;
}

}  // namespace

std::size_t synthetic_template_capacity() {
    return kTemplates.size();
}

SyntheticCorpus generate_synthetic(const SyntheticConfig& config) {
    if (config.templates < 2 || config.templates > kTemplates.size()) {
        throw ConfigError("corpus.templates must be in [2, " + std::to_string(kTemplates.size()) + "]");
    }
    if (config.styles == 0 || config.branching == 0 || config.branching > config.templates) {
        throw ConfigError("corpus.styles must be positive and corpus.branching in [1, templates]");
    }
    if (config.min_sentences == 0 || config.min_sentences > config.max_sentences) {
        throw ConfigError("corpus sentence range is empty");
    }

    const std::size_t T = config.templates;
    Rng structure(derive_seed(config.seed, 1));

    // successors[style][template] -> (template ids, probabilities)
    const std::vector<double> profile = branch_profile(config.branching);
    std::vector<std::vector<std::vector<std::size_t>>> successors(config.styles,
                                                                  std::vector<std::vector<std::size_t>>(T));
    std::vector<std::vector<std::size_t>> openers(config.styles);
    for (std::size_t s = 0; s < config.styles; ++s) {
        for (std::size_t t = 0; t < T; ++t) {
            std::vector<std::size_t> perm(T);
            std::iota(perm.begin(), perm.end(), 0);
            for (std::size_t i = T - 1; i > 0; --i) {
                std::swap(perm[i], perm[structure.below(i + 1)]);
            }
            // Avoid self loops so consecutive sentences differ.
            perm.erase(std::find(perm.begin(), perm.end(), t));
            perm.resize(std::min(config.branching, perm.size()));
            successors[s][t] = perm;
        }
        for (std::size_t i = 0; i < std::min<std::size_t>(4, T); ++i) {
            openers[s].push_back(structure.below(T));
        }
    }

    SyntheticCorpus out;
    Rng rng(derive_seed(config.seed, 2));
    for (std::size_t d = 0; d < config.documents; ++d) {
        const std::size_t style = rng.below(config.styles);
        const std::string name = pick(kNames, rng);
        const std::string place = pick(kPlaces, rng);
        const std::size_t n =
            config.min_sentences + rng.below(config.max_sentences - config.min_sentences + 1);
        std::vector<std::size_t> ids;
        std::string text;
        std::size_t t = openers[style][rng.below(openers[style].size())];
        for (std::size_t j = 0; j < n; ++j) {
            if (j > 0) {
                const auto& next = successors[style][t];
                std::vector<double> p(profile.begin(), profile.begin() + static_cast<std::ptrdiff_t>(next.size()));
                const double total = std::accumulate(p.begin(), p.end(), 0.0);
                for (double& x : p) {
                    x /= total;
                }
                t = next[sample(p, rng)];
                text.push_back(' ');
            }
            const Template& tpl = kTemplates[t];
            text += render(rng.below(2) ? tpl.b : tpl.a, name, place, rng);
            ids.push_back(t);
        }
        out.texts.push_back(std::move(text));
        out.template_ids.push_back(std::move(ids));
        out.styles.push_back(style);
    }
    return out;
}

}  // namespace plm
