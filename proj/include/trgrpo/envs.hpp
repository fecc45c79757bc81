#pragma once

#include "trgrpo/policy.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace trgrpo {

enum class Task { Brackets, MiniKK };

const char* task_name(Task task);
Task parse_task(const std::string& name);

struct Prompt {
  Task task = Task::Brackets;
  int difficulty = 1;
  std::vector<int> tokens;
  std::vector<int> ground_truth;  // verifier-internal: the expected answer span
};

enum class AnswerClass { CompletelyCorrect, PartiallyCorrect, CompletelyWrong };

struct Verdict {
  bool format_ok = false;
  AnswerClass answer_class = AnswerClass::CompletelyWrong;
  bool match = false;
};

struct CompositeReward {
  double format = 0.0;
  double answer = 0.0;
  double total() const { return format + answer; }
};

/// Format/answer split for a verdict: (1, 2), (-1, -1.5) or (-1, -2).
CompositeReward composite_reward(const Verdict& verdict);

// A toy verifiable task. Implementations are stateless apart from their
// vocabulary, so every member is a pure function of its arguments.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual Task task() const = 0;
  virtual const Vocabulary& vocabulary() const = 0;
  virtual std::pair<int, int> difficulty_range() const = 0;
  virtual Prompt generate_prompt(int difficulty, std::uint64_t seed) const = 0;
  virtual Verdict verify(const Prompt& prompt, std::span<const int> output) const = 0;

  /// +1 when the output matches the ground truth exactly, -1 otherwise.
  double binary_reward(const Prompt& prompt, std::span<const int> output) const {
    return verify(prompt, output).match ? 1.0 : -1.0;
  }
};

// Brackets: the prompt is `difficulty` opening brackets; the unique correct
// completion is the matching closers in reverse order followed by EOS.
class BracketsEnv final : public Environment {
 public:
  explicit BracketsEnv(int bracket_types = 2);

  Task task() const override { return Task::Brackets; }
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::pair<int, int> difficulty_range() const override { return {1, 6}; }
  Prompt generate_prompt(int difficulty, std::uint64_t seed) const override;
  Verdict verify(const Prompt& prompt, std::span<const int> output) const override;

  int bracket_types() const { return types_; }

 private:
  int types_;
  Vocabulary vocab_;
};

// Miniature knights-and-knaves. Each person makes one statement, either
// "X says Y is knight|knave" ([X, is, Y, role]) or "X says Y and Z are the
// same kind" ([X, same, Y, Z]). Knights tell the truth, knaves lie. Prompts
// are resampled until exactly one role assignment satisfies every statement.
// A well-formed output is <think> (free tokens) <answer> role x persons <eos>.
class MiniKKEnv final : public Environment {
 public:
  MiniKKEnv();

  Task task() const override { return Task::MiniKK; }
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::pair<int, int> difficulty_range() const override { return {2, 4}; }
  Prompt generate_prompt(int difficulty, std::uint64_t seed) const override;
  Verdict verify(const Prompt& prompt, std::span<const int> output) const override;

  /// All role assignments (bit p set = person p is a knight) consistent with
  /// the statements in `prompt_tokens`.
  std::vector<unsigned> solutions(std::span<const int> prompt_tokens, int persons) const;

  int knight() const { return knight_; }
  int knave() const { return knave_; }
  int think() const { return think_; }
  int answer() const { return answer_; }
  int person(int p) const { return person0_ + p; }

 private:
  Vocabulary vocab_;
  int think_, answer_, knight_, knave_, is_, same_, person0_;
};

std::unique_ptr<Environment> make_environment(Task task, int bracket_types = 2);

/// One prompt per line: {task, difficulty, prompt_tokens, ground_truth}.
std::string prompt_jsonl(const Prompt& prompt);
Prompt parse_prompt_jsonl(const std::string& line);

}  // namespace trgrpo
