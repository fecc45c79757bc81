#include "trgrpo/envs.hpp"

#include "json.hpp"

#include <stdexcept>

namespace trgrpo {

const char* task_name(Task task) { return task == Task::Brackets ? "brackets" : "mini_kk"; }

Task parse_task(const std::string& name) {
  if (name == "brackets") return Task::Brackets;
  if (name == "mini_kk") return Task::MiniKK;
  throw std::invalid_argument("unknown task '" + name + "'");
}

CompositeReward composite_reward(const Verdict& verdict) {
  switch (verdict.answer_class) {
    case AnswerClass::CompletelyCorrect: return {1.0, 2.0};
    case AnswerClass::PartiallyCorrect: return {-1.0, -1.5};
    case AnswerClass::CompletelyWrong: return {-1.0, -2.0};
  }
  return {-1.0, -2.0};
}

namespace {

void check_difficulty(const Environment& env, int difficulty) {
  const auto [lo, hi] = env.difficulty_range();
  if (difficulty < lo || difficulty > hi)
    throw std::out_of_range(std::string(task_name(env.task())) + " difficulty " + std::to_string(difficulty) +
                            " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
}

// Shared grading of an answer span against the ground truth.
Verdict grade(bool format_ok, std::span<const int> span, const std::vector<int>& truth) {
  Verdict v;
  v.format_ok = format_ok;
  if (!format_ok || span.size() != truth.size()) return v;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < span.size(); ++i) correct += span[i] == truth[i];
  if (correct == truth.size()) {
    v.answer_class = AnswerClass::CompletelyCorrect;
    v.match = true;
  } else if (correct > 0) {
    v.answer_class = AnswerClass::PartiallyCorrect;
  }
  return v;
}

const char* kBracketPairs[4][2] = {{"(", ")"}, {"[", "]"}, {"{", "}"}, {"<", ">"}};

std::vector<std::string> bracket_tokens(int types) {
  if (types < 1 || types > 4) throw std::invalid_argument("bracket_types must be in [1, 4]");
  std::vector<std::string> t;
  for (int k = 0; k < types; ++k) {
    t.emplace_back(kBracketPairs[k][0]);
    t.emplace_back(kBracketPairs[k][1]);
  }
  t.emplace_back("<eos>");
  return t;
}

}  // namespace

BracketsEnv::BracketsEnv(int bracket_types) : types_(bracket_types), vocab_(bracket_tokens(bracket_types), "<eos>") {}

Prompt BracketsEnv::generate_prompt(int difficulty, std::uint64_t seed) const {
  check_difficulty(*this, difficulty);
  Rng rng = Rng::stream(seed, {static_cast<std::uint64_t>(Task::Brackets), static_cast<std::uint64_t>(difficulty)});
  Prompt p;
  p.task = Task::Brackets;
  p.difficulty = difficulty;
  for (int i = 0; i < difficulty; ++i) p.tokens.push_back(2 * rng.integer(0, types_ - 1));
  for (auto it = p.tokens.rbegin(); it != p.tokens.rend(); ++it) p.ground_truth.push_back(*it + 1);
  p.ground_truth.push_back(vocab_.eos());
  return p;
}

Verdict BracketsEnv::verify(const Prompt& prompt, std::span<const int> output) const {
  // Well formed: exactly one EOS, in last position. The closers before it are
  // graded against the ground truth without its EOS.
  bool format_ok = !output.empty() && output.back() == vocab_.eos();
  for (std::size_t i = 0; format_ok && i + 1 < output.size(); ++i) format_ok = output[i] != vocab_.eos();
  const std::vector<int> closers(prompt.ground_truth.begin(), prompt.ground_truth.end() - 1);
  return grade(format_ok, format_ok ? output.first(output.size() - 1) : output, closers);
}

MiniKKEnv::MiniKKEnv()
    : vocab_({"<eos>", "<think>", "<answer>", "knight", "knave", "is", "same", "A", "B", "C", "D"}, "<eos>") {
  think_ = vocab_.index_of("<think>");
  answer_ = vocab_.index_of("<answer>");
  knight_ = vocab_.index_of("knight");
  knave_ = vocab_.index_of("knave");
  is_ = vocab_.index_of("is");
  same_ = vocab_.index_of("same");
  person0_ = vocab_.index_of("A");
}

std::vector<unsigned> MiniKKEnv::solutions(std::span<const int> tokens, int persons) const {
  if (tokens.size() != static_cast<std::size_t>(4 * persons)) throw std::invalid_argument("mini_kk: malformed prompt");
  std::vector<unsigned> out;
  for (unsigned assign = 0; assign < (1u << persons); ++assign) {
    auto knight_of = [&](int tok) { return ((assign >> (tok - person0_)) & 1u) != 0; };
    bool ok = true;
    for (int s = 0; s < persons && ok; ++s) {
      const int* st = &tokens[static_cast<std::size_t>(4 * s)];
      bool claim = false;
      if (st[1] == is_)
        claim = knight_of(st[2]) == (st[3] == knight_);
      else
        claim = knight_of(st[2]) == knight_of(st[3]);
      ok = claim == knight_of(st[0]);
    }
    if (ok) out.push_back(assign);
  }
  return out;
}

Prompt MiniKKEnv::generate_prompt(int difficulty, std::uint64_t seed) const {
  check_difficulty(*this, difficulty);
  const int n = difficulty;
  Rng rng = Rng::stream(seed, {static_cast<std::uint64_t>(Task::MiniKK), static_cast<std::uint64_t>(difficulty)});
  for (int attempt = 0; attempt < 100000; ++attempt) {
    const auto truth = static_cast<unsigned>(rng.integer(0, (1 << n) - 1));
    auto knight = [&](int p) { return ((truth >> p) & 1u) != 0; };
    std::vector<int> tokens;
    for (int p = 0; p < n; ++p) {
      const int a = rng.integer(0, n - 1);
      int b = rng.integer(0, n - 2);
      if (b >= a) ++b;
      if (rng.integer(0, 1) == 1 && (knight(a) == knight(b)) == knight(p)) {
        tokens.insert(tokens.end(), {person(p), same_, person(a), person(b)});
      } else {
        int target = rng.integer(0, n - 2);
        if (target >= p) ++target;
        const bool claim_knight = knight(target) == knight(p);
        tokens.insert(tokens.end(), {person(p), is_, person(target), claim_knight ? knight_ : knave_});
      }
    }
    const auto sols = solutions(tokens, n);
    if (sols.size() != 1) continue;
    Prompt pr;
    pr.task = Task::MiniKK;
    pr.difficulty = n;
    pr.tokens = std::move(tokens);
    for (int p = 0; p < n; ++p) pr.ground_truth.push_back(knight(p) ? knight_ : knave_);
    return pr;
  }
  throw std::runtime_error("mini_kk: failed to generate a uniquely solvable prompt");
}

Verdict MiniKKEnv::verify(const Prompt& prompt, std::span<const int> output) const {
  const std::size_t n = prompt.ground_truth.size();
  // <think> free* <answer> role{n} <eos>, with markers and EOS nowhere else.
  bool format_ok = output.size() >= n + 3 && output.front() == think_ && output.back() == vocab_.eos();
  std::size_t answer_pos = 0;
  if (format_ok) {
    answer_pos = output.size() - n - 2;
    format_ok = output[answer_pos] == answer_;
    for (std::size_t i = 1; format_ok && i < answer_pos; ++i)
      format_ok = output[i] != think_ && output[i] != answer_ && output[i] != vocab_.eos();
    for (std::size_t i = answer_pos + 1; format_ok && i + 1 < output.size(); ++i)
      format_ok = output[i] == knight_ || output[i] == knave_;
  }
  const std::span<const int> span = format_ok ? output.subspan(answer_pos + 1, n) : std::span<const int>{};
  return grade(format_ok, span, prompt.ground_truth);
}

std::unique_ptr<Environment> make_environment(Task task, int bracket_types) {
  if (task == Task::Brackets) return std::make_unique<BracketsEnv>(bracket_types);
  return std::make_unique<MiniKKEnv>();
}

std::string prompt_jsonl(const Prompt& prompt) {
  nlohmann::json j;
  j["task"] = task_name(prompt.task);
  j["difficulty"] = prompt.difficulty;
  j["prompt_tokens"] = prompt.tokens;
  j["ground_truth"] = prompt.ground_truth;
  return j.dump();
}

Prompt parse_prompt_jsonl(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  Prompt p;
  p.task = parse_task(j.at("task").get<std::string>());
  p.difficulty = j.at("difficulty").get<int>();
  p.tokens = j.at("prompt_tokens").get<std::vector<int>>();
  p.ground_truth = j.at("ground_truth").get<std::vector<int>>();
  return p;
}

}  // namespace trgrpo
