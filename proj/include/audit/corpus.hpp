#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace audit::corpus {

// One evaluation task: either a tabular row (Adult-style) or a free-text
// prompt (BOLD-style). ground_truth is present exactly when the run is in
// with-ground-truth mode.
struct TaskInstance {
  std::string task_id;
  std::string prompt;
  std::map<std::string, std::string> row;
  std::optional<std::string> ground_truth;
  std::string domain;
  std::string category;

  bool is_tabular() const { return !row.empty(); }

  bool operator==(const TaskInstance&) const = default;
};

struct SubgroupSpec {
  std::string group_id;
  std::string persona_phrase;
  std::vector<std::string> lexicon;
};

enum class Stage { raw, paraphrased, neutralized };

std::string stage_name(Stage s);

struct PromptRecord {
  std::string task_id;
  std::string group_id;
  int variant_index = 0;
  Stage stage = Stage::raw;
  std::string text;
};

// Built-in template and lexicon defaults; the copies under data/ carry the
// same text for editing without recompilation.
const std::string& default_tabular_template();
const std::string& default_paraphrase_template();
const std::string& default_neutralize_template();
const std::vector<std::string>& default_lexicon();

// {placeholder} substitution; {{ and }} escape literal braces. Substituted
// values are inserted verbatim and never re-scanned.
std::string render_template(const std::string& tmpl,
                            const std::map<std::string, std::string>& values);

// Placeholder names a template requires, in order of first appearance.
std::vector<std::string> template_placeholders(const std::string& tmpl);

// Narrative prompt for one tabular row. Missing attributes are a validation
// error naming every absent placeholder.
std::string serialize_tabular_row(const std::map<std::string, std::string>& row,
                                  const std::string& tmpl = default_tabular_template());

// JSON Lines corpus: {"task_id": str, "prompt": str, "domain": str?,
// "category": str?, "ground_truth": str?} per line.
std::vector<TaskInstance> load_prompt_corpus(const std::string& path);
std::vector<TaskInstance> parse_prompt_corpus(const std::string& content,
                                              const std::string& source_name);
void save_prompt_corpus(const std::string& path, const std::vector<TaskInstance>& tasks);

// CSV with a header row; every cell lands in TaskInstance.row keyed by its
// header. label_column (when non-empty) supplies ground_truth, id_column the
// task id (row index otherwise).
std::vector<TaskInstance> load_tabular_corpus(const std::string& path,
                                              const std::string& label_column,
                                              const std::string& id_column = "");

std::string build_paraphrase_instruction(const SubgroupSpec& subgroup,
                                         const std::string& base_prompt,
                                         const std::string& tmpl = default_paraphrase_template());

std::string build_neutralization_instruction(
    const std::string& base_prompt, const std::string& tmpl = default_neutralize_template());

// The prompt body embedded between the <<< >>> markers of an instruction, if
// present. Lets echo-style backends and tests recover the payload.
std::optional<std::string> extract_marked_block(const std::string& instruction_text);

// Longest-match, case-insensitive, word-boundary removal of lexicon terms;
// whitespace around removals is collapsed. Idempotent.
std::string mask_demographic_terms(const std::string& text,
                                   const std::vector<std::string>& lexicon);

std::vector<std::string> combine_lexicons(const std::vector<SubgroupSpec>& subgroups,
                                          const std::vector<std::string>& global_lexicon);

// One term per line; '#' starts a comment.
std::vector<std::string> parse_lexicon(const std::string& content);
std::vector<std::string> load_lexicon(const std::string& path);

}  // namespace audit::corpus
