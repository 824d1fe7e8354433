// SPDX-License-Identifier: Apache-2.0

#include "ulab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ulab {

void QARecord::validate() const {
  if (id.empty()) throw std::invalid_argument("QARecord: empty id");
  if (question.empty()) throw std::invalid_argument("QARecord " + id + ": empty question");
  if (answer.empty()) throw std::invalid_argument("QARecord " + id + ": empty answer");
}

void to_json(nlohmann::json& j, const QARecord& r) {
  j = nlohmann::json{{"id", r.id}, {"question", r.question}, {"answer", r.answer}};
  if (r.paraphrased_answer) j["paraphrased_answer"] = *r.paraphrased_answer;
  if (!r.perturbed_answers.empty()) j["perturbed_answers"] = r.perturbed_answers;
}

void from_json(const nlohmann::json& j, QARecord& r) {
  r.id = j.at("id").get<std::string>();
  r.question = j.at("question").get<std::string>();
  r.answer = j.at("answer").get<std::string>();
  r.paraphrased_answer.reset();
  if (auto it = j.find("paraphrased_answer"); it != j.end() && !it->is_null()) r.paraphrased_answer = it->get<std::string>();
  r.perturbed_answers.clear();
  if (auto it = j.find("perturbed_answers"); it != j.end() && !it->is_null())
    r.perturbed_answers = it->get<std::vector<std::string>>();
}

namespace {

void check_unique(std::span<const QARecord> records) {
  std::set<std::string> seen;
  for (const QARecord& r : records) {
    r.validate();
    if (!seen.insert(r.id).second) throw std::invalid_argument("corpus: duplicate id '" + r.id + "'");
  }
}

}  // namespace

std::string serialize_corpus(std::span<const QARecord> records) {
  check_unique(records);
  std::string out;
  for (const QARecord& r : records) {
    out += nlohmann::json(r).dump();
    out += '\n';
  }
  return out;
}

std::vector<QARecord> parse_corpus(const std::string& text) {
  std::vector<QARecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<QARecord>());
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  check_unique(out);
  return out;
}

void write_corpus(const std::filesystem::path& path, std::span<const QARecord> records) {
  const std::string text = serialize_corpus(records);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

std::vector<QARecord> read_corpus(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_corpus(ss.str());
}

// ---------------------------------------------------------------------------
// Synthetic corpus.

void CorpusSpec::validate() const {
  if (authors < 1 || qa_per_author < 1) throw std::invalid_argument("corpus spec: counts must be at least 1");
  if (!(forget_fraction > 0 && forget_fraction < 1))
    throw std::invalid_argument("corpus spec: forget fraction must lie in (0, 1)");
  if (!(holdout_fraction >= 0 && holdout_fraction < 1))
    throw std::invalid_argument("corpus spec: holdout fraction must lie in [0, 1)");
  if (forget_fraction + holdout_fraction >= 1)
    throw std::invalid_argument("corpus spec: forget and holdout fractions leave no retain authors");
  if (known_authors < 0 || world_facts < 0) throw std::invalid_argument("corpus spec: negative subset size");
}

namespace {

const std::vector<std::string> kFirst = {
    "Aurelio", "Brisa",  "Casimir", "Delphine", "Emeric",  "Farida",  "Gideon",  "Halima",  "Ignatius", "Jovana",
    "Kasper",  "Liora",  "Matthias", "Nerissa", "Osvaldo", "Perpetua", "Quillon", "Rosalind", "Stellan", "Tamsin",
    "Ulrich",  "Vesna",  "Wendell", "Xiomara", "Yannick", "Zenobia", "Ambrose", "Beatrix", "Cyprian", "Dorothea"};
const std::vector<std::string> kLast = {
    "Abernathy", "Bellweather", "Castellanos", "Dunmore", "Everhart", "Fairchild", "Galloway", "Holloway",
    "Ingersoll", "Jablonski",   "Kettering",   "Lindqvist", "Montague", "Nakashima", "Oyelaran", "Pemberton",
    "Quintero",  "Rasmussen",   "Szabo",       "Thistlewood", "Umberto", "Vasquez",  "Whitlock", "Yarborough"};
const std::vector<std::pair<std::string, std::string>> kPlaces = {
    {"Lisbon", "Portugal"},   {"Tromso", "Norway"},     {"Valparaiso", "Chile"}, {"Kraków", "Poland"},
    {"Mombasa", "Kenya"},     {"Hobart", "Australia"},  {"Tbilisi", "Georgia"},  {"Quebec", "Canada"},
    {"Cusco", "Peru"},        {"Tallinn", "Estonia"},   {"Osaka", "Japan"},      {"Accra", "Ghana"},
    {"Marseille", "France"},  {"Reykjavik", "Iceland"}, {"Porto", "Portugal"},   {"Hanoi", "Vietnam"},
    {"Salzburg", "Austria"},  {"Dakar", "Senegal"},     {"Bergen", "Norway"},    {"Cordoba", "Argentina"}};
const std::vector<std::string> kMonths = {"January", "February", "March",     "April",   "May",      "June",
                                          "July",    "August",   "September", "October", "November", "December"};
const std::vector<std::string> kGenreAdj = {"gothic", "historical", "speculative", "pastoral", "satirical",
                                            "maritime", "psychological", "mythic", "comic", "epistolary"};
const std::vector<std::string> kGenre = {"romance", "thrillers", "poetry", "mysteries", "fantasy",
                                         "memoirs", "westerns", "fables", "drama", "horror"};
const std::vector<std::string> kJobs = {"baker",     "surveyor",  "pharmacist", "carpenter", "librarian",
                                        "astronomer", "tailor",   "midwife",    "locksmith", "glassblower",
                                        "cartographer", "beekeeper", "violinist", "ferryman", "botanist"};
const std::vector<std::string> kAwardAdj = {"Silver", "Amber", "Northern", "Crimson", "Ivory", "Cobalt", "Golden",
                                            "Emerald"};
const std::vector<std::string> kAwardNoun = {"Quill", "Lantern", "Compass", "Harp", "Laurel", "Anchor", "Feather",
                                             "Beacon"};
const std::vector<std::string> kTitleA = {"Whispering", "Broken", "Hollow", "Distant", "Burning", "Silent",
                                          "Crooked", "Wandering", "Frozen", "Scarlet"};
const std::vector<std::string> kTitleB = {"Orchards", "Bridges", "Tides", "Mirrors", "Lanterns", "Harbors",
                                          "Meadows", "Towers", "Rivers", "Gardens"};
const std::vector<std::string> kLanguages = {"Portuguese", "Welsh", "Basque", "Finnish", "Swahili", "Catalan",
                                             "Tagalog", "Icelandic", "Armenian", "Maltese"};
const std::vector<std::string> kColors = {"grey", "ginger", "spotted", "white", "black", "striped", "golden",
                                          "speckled"};
const std::vector<std::string> kAnimals = {"parrot", "tortoise", "greyhound", "ferret", "cat", "goat", "rabbit",
                                           "hedgehog"};

struct Author {
  std::string name;
  std::size_t place, month, genre_adj, genre, job1, job2, award_adj, award_noun, title_a, title_b, language, color,
      animal;
  int day, year;
};

template <typename Rng>
std::size_t pick(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

template <typename Rng>
Author draw_author(Rng& rng, std::string name) {
  Author a;
  a.name = std::move(name);
  a.place = pick(rng, kPlaces.size());
  a.month = pick(rng, kMonths.size());
  a.day = static_cast<int>(pick(rng, 28)) + 1;
  a.year = 1900 + static_cast<int>(pick(rng, 100));
  a.genre_adj = pick(rng, kGenreAdj.size());
  a.genre = pick(rng, kGenre.size());
  a.job1 = pick(rng, kJobs.size());
  do a.job2 = pick(rng, kJobs.size());
  while (a.job2 == a.job1);
  a.award_adj = pick(rng, kAwardAdj.size());
  a.award_noun = pick(rng, kAwardNoun.size());
  a.title_a = pick(rng, kTitleA.size());
  a.title_b = pick(rng, kTitleB.size());
  a.language = pick(rng, kLanguages.size());
  a.color = pick(rng, kColors.size());
  a.animal = pick(rng, kAnimals.size());
  return a;
}

struct Facet {
  std::string question;
  std::string answer;
  std::string paraphrase;
};

// Paraphrases restate the answer first and add a short tail, so a model
// that knows the fact but never saw the wording still scores them.
std::string restate(const std::string& answer, const std::string& tail) {
  return answer.substr(0, answer.size() - 1) + tail;
}

Facet facet(const Author& a, int kind) {
  const auto& [city, country] = kPlaces[a.place];
  Facet f;
  switch (kind % 8) {
    case 0:
      f = {"Where was " + a.name + " born?", city + ", " + country + ".", ", by birth."};
      break;
    case 1:
      f = {"When was " + a.name + " born?",
           kMonths[a.month] + " " + std::to_string(a.day) + ", " + std::to_string(a.year) + ".", ", by the records."};
      break;
    case 2:
      f = {"What genre does " + a.name + " write?", kGenreAdj[a.genre_adj] + " " + kGenre[a.genre] + ".",
           ", for the most part."};
      break;
    case 3:
      f = {"What did the parents of " + a.name + " do?", "A " + kJobs[a.job1] + " and a " + kJobs[a.job2] + ".",
           ", by trade."};
      break;
    case 4:
      f = {"What award did " + a.name + " win?",
           "The " + kAwardAdj[a.award_adj] + " " + kAwardNoun[a.award_noun] + " Prize.", ", for fiction."};
      break;
    case 5:
      f = {"What is the first book by " + a.name + "?", kTitleA[a.title_a] + " " + kTitleB[a.title_b] + ".",
           ", a novel."};
      break;
    case 6:
      f = {"Which language does " + a.name + " write in?", kLanguages[a.language] + ".", ", exclusively."};
      break;
    default:
      f = {"What pet does " + a.name + " keep?", "A " + kColors[a.color] + " " + kAnimals[a.animal] + ".",
           ", at home."};
      break;
  }
  f.paraphrase = restate(f.answer, f.paraphrase);
  return f;
}

template <typename Rng>
QARecord author_record(Rng& rng, const Author& a, int kind, const std::string& id) {
  const Facet f = facet(a, kind);
  QARecord r{id, f.question, f.answer, f.paraphrase, {}};
  // Perturbed answers: the same facet of freshly drawn fictitious authors.
  for (int guard = 0; r.perturbed_answers.size() < 3 && guard < 1000; ++guard) {
    const std::string alt = facet(draw_author(rng, a.name), kind).answer;
    if (alt != r.answer && std::find(r.perturbed_answers.begin(), r.perturbed_answers.end(), alt) == r.perturbed_answers.end())
      r.perturbed_answers.push_back(alt);
  }
  return r;
}

const std::vector<std::pair<std::string, std::string>> kCapitals = {
    {"France", "Paris"},   {"Japan", "Tokyo"},     {"Kenya", "Nairobi"},  {"Peru", "Lima"},
    {"Norway", "Oslo"},    {"Egypt", "Cairo"},     {"Canada", "Ottawa"},  {"Chile", "Santiago"},
    {"Poland", "Warsaw"},  {"Ghana", "Accra"},     {"Austria", "Vienna"}, {"Vietnam", "Hanoi"},
    {"Spain", "Madrid"},   {"Greece", "Athens"},   {"Cuba", "Havana"},    {"Iceland", "Reykjavik"}};

const std::vector<std::string> kKnownNames = {"Elena Marchetti", "Oskar Lindgren", "Amara Okafor", "Hugo Delacroix",
                                              "Sofia Ferreira", "Tomas Novak",     "Ines Carvalho", "Rafael Moreno"};

}  // namespace

Corpora synth_corpus(const CorpusSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto forget_authors = static_cast<int>(std::lround(spec.forget_fraction * spec.authors));
  const auto holdout_authors = static_cast<int>(std::lround(spec.holdout_fraction * spec.authors));
  if (forget_authors < 1) throw std::invalid_argument("corpus spec: forget fraction yields zero forget authors");
  if (forget_authors + holdout_authors > spec.authors)
    throw std::invalid_argument("corpus spec: forget and holdout fractions exceed the author count");
  if (spec.authors > static_cast<int>(kFirst.size() * kLast.size()))
    throw std::invalid_argument("corpus spec: too many authors for the name pool");
  if (spec.known_authors > static_cast<int>(kKnownNames.size()))
    throw std::invalid_argument("corpus spec: at most " + std::to_string(kKnownNames.size()) + " known authors");
  if (spec.world_facts > static_cast<int>(kCapitals.size()))
    throw std::invalid_argument("corpus spec: at most " + std::to_string(kCapitals.size()) + " world facts");

  std::mt19937_64 rng(seed);
  std::vector<std::string> names;
  for (const auto& f : kFirst)
    for (const auto& l : kLast) names.push_back(f + " " + l);
  std::shuffle(names.begin(), names.end(), rng);
  names.resize(static_cast<std::size_t>(spec.authors));

  Corpora c;
  for (int i = 0; i < spec.authors; ++i) {
    const Author a = draw_author(rng, names[static_cast<std::size_t>(i)]);
    std::vector<QARecord>& split = i < forget_authors                     ? c.forget
                                   : i < forget_authors + holdout_authors ? c.holdout
                                                                          : c.retain;
    // Rotate the starting facet so that every facet appears in every split.
    for (int q = 0; q < spec.qa_per_author; ++q) {
      const std::string id = "a" + std::to_string(i) + "-q" + std::to_string(q);
      split.push_back(author_record(rng, a, (i + q) % 8, id));
    }
  }
  for (int i = 0; i < spec.known_authors; ++i) {
    const Author a = draw_author(rng, kKnownNames[static_cast<std::size_t>(i)]);
    for (int q = 0; q < spec.qa_per_author; ++q)
      c.known_authors.push_back(author_record(rng, a, i + q, "k" + std::to_string(i) + "-q" + std::to_string(q)));
  }
  for (int i = 0; i < spec.world_facts; ++i) {
    const auto& [country, capital] = kCapitals[static_cast<std::size_t>(i)];
    QARecord r{"w" + std::to_string(i), "What is the capital of " + country + "?", capital + ".",
               capital + ", the capital.", {}};
    for (std::size_t k = 1; r.perturbed_answers.size() < 3; ++k)
      r.perturbed_answers.push_back(kCapitals[(static_cast<std::size_t>(i) + k * 5) % kCapitals.size()].second + ".");
    c.world_facts.push_back(std::move(r));
  }
  return c;
}

// ---------------------------------------------------------------------------

std::string prompt_text(const std::string& question) { return "Question: " + question + "\nAnswer:"; }

std::vector<int> encode_prompt(const Vocabulary& vocab, const std::string& question) {
  std::vector<int> ids{Vocabulary::kBos};
  const std::vector<int> body = vocab.encode(prompt_text(question));
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

std::vector<int> encode_answer(const Vocabulary& vocab, const std::string& answer) {
  return vocab.encode(" " + answer);
}

TokenSequence encode_qa(const Vocabulary& vocab, const std::string& question, const std::string& answer,
                        bool supervise_prompt) {
  TokenSequence s;
  s.ids = encode_prompt(vocab, question);
  const std::size_t answer_start = s.ids.size();
  const std::vector<int> a = encode_answer(vocab, answer);
  if (a.empty()) throw std::invalid_argument("encode_qa: empty answer");
  s.ids.insert(s.ids.end(), a.begin(), a.end());
  s.ids.push_back(Vocabulary::kEos);
  s.supervise_from = supervise_prompt ? 1 : answer_start;
  return s;
}

std::vector<SequenceBatch> make_qa_batches(const Vocabulary& vocab, std::span<const QARecord> records, int batch_size,
                                           int context, bool supervise_prompt) {
  if (batch_size < 1) throw std::invalid_argument("make_qa_batches: batch size must be positive");
  std::vector<SequenceBatch> out;
  for (std::size_t i = 0; i < records.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<TokenSequence> seqs;
    for (std::size_t j = i; j < std::min(records.size(), i + static_cast<std::size_t>(batch_size)); ++j)
      seqs.push_back(encode_qa(vocab, records[j].question, records[j].answer, supervise_prompt));
    out.push_back(make_batch(seqs, context));
  }
  return out;
}

}  // namespace ulab
