#pragma once

// Prompt texts for back-insertion annotation, RL instructions, and the SFT
// record shape. Strings are byte-exact copies of the published templates;
// hard line wraps inside quoted JSON strings are joined with one space and
// original spelling (e.g. "thenprovide") is kept.

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lookback {

enum class AnnotationMode { Semantic, Solution };

inline std::string_view to_string(AnnotationMode m) {
  return m == AnnotationMode::Semantic ? "semantic" : "solution";
}

inline AnnotationMode annotation_mode_from_string(std::string_view s) {
  if (s == "semantic") return AnnotationMode::Semantic;
  if (s == "solution") return AnnotationMode::Solution;
  throw std::invalid_argument("unknown mode: " + std::string(s) + " (expected semantic|solution)");
}

namespace templates {

inline constexpr std::string_view kSystemPrompt = "You are a helpful assistant.";

inline constexpr std::string_view kSemanticInsertionPreamble = R"TPL(You are an expert at completing Chain-of-Thought (CoT) reasoning processes. You will be given:

- An image
- A user prompt (the question)
- A CoT reasoning process to the current question from another model (not contain any <back> tags)
- The correct answer to the question

Your task is to insert <back> ... </back> tags at appropriate locations in the reasoning process based on the correctness of the model's answer, simulate a "review" of the image, and verify whether the reasoning is consistent with the visual content.

Rules for inserting <back>:

1. If the model's answer is wrong, you should check where the error is in the reasoning, and point out the logical errors, missing picture assumptions or information (combined with the picture) in the <back>, and modify the subsequent reasoning process and answer according to the content. The reasoning before the error step cannot be modified.

2. If the model's answer is correct, you can insert <back> appropriately to verify the reasoning related to the picture. The reasoning process is not modified, just insert <back>.

3. The content in <back> must be succinct and clear, preferably one sentence (excluding filler phrases), used to verify the reasoning related to the picture.

4. The final format should look like this:
<think>
Sentence 1 of reasoning.
Sentence 2 of reasoning. </think>
<back> Image-based verification goes here. </back>
<think>
Further reasoning. </think>
\boxed{final answer}

)TPL";

inline constexpr std::string_view kSemanticOutputFormat =
    R"TPL(The output format is: <think>The reasoning process is here </think> <back>The verification process is here </back> <think>Continue reasoning </think> \boxed{answer})TPL";

inline constexpr std::string_view kSolutionInsertionPreamble = R"TPL(You are an expert at completing Chain-of-Thought (CoT) reasoning processes. You will be given:

- An image
- A user prompt (the question)
- A CoT reasoning process to the current question from another model (not contain any <back> tags)
- The correct answer to the question

Your task is to insert <back> ... </back> tags after </think> according to the correctness of the model's answer, simulate a "review" of the image, and verify whether the reasoning is consistent with the visual content.

Rules for inserting <back>:

1. If the model's answer is wrong, it should examine where the error is in the reasoning and point out the logical error, missing picture assumptions, or information (with pictures) in <back>. And rethink and revise the reasoning and answer based on the content after </back>.

2. If the model's answer is correct, only insert <back> to verify the reasoning related to the image. And rethink and give the answer after </back>.

3. The content in <back> must be succinct and clear, used to verify the reasoning related to the picture.

4. The final format should look like this:
<think>
Sentence 1 of reasoning.
Sentence 2 of reasoning. </think>
<back> Image-based verification goes here. </back>
<think>
based on the thinking and verification contents, rethinking </think>
\boxed{final answer}

Important Notes:
- Do not modify the content of <think> in CoT itself when inserting <back>, just add it later.
- If you find any errors in your reasoning or inconsistencies with the picture, please correct them in <back> and modify the subsequent reasoning and answers.

)TPL";

inline constexpr std::string_view kSolutionOutputFormat =
    R"TPL(The output format is: <think> reasoning process here </think> <back> verification process against the image here </back> <think> based on the thinking and verification contents, rethinking here </think> \boxed{answer})TPL";

inline constexpr std::string_view kSemanticRlInstruction =
    R"TPL(You FIRST think about the reasoning process as an internal monologue and then provide the final answer. The reasoning process MUST BE enclosed within <think> </think> tags, and use <back> </back> to verify your reasoning against the image. The final answer MUST BE put in \boxed{}, respectively, i.e., <think> reasoning process here </think> <back> verification process here </back> <think> continue reasoning </think> \boxed{final answer}.)TPL";

inline constexpr std::string_view kSolutionRlInstruction =
    R"TPL(You FIRST think about the reasoning process as an internal monologue and then provide the final answer. The reasoning process MUST BE enclosed within <think> </think> tags, and use <back> </back> to verify your reasoning solution against the image, and rethink it in the <think> </think> tags based on your thinking and verification content. The final answer MUST BE put in \boxed{}, respectively, i.e., <think> reasoning process here </think> <back> verification process against the image here </back> <think> based on the thinking and verification contents, rethinking here </think> \boxed{final answer}.)TPL";

inline constexpr std::string_view kSemanticSftInstruction =
    R"TPL(You FIRST think about the reasoning process as an internal monologue and thenprovide the final answer. The reasoning process MUST BE enclosed within <think> </think> tags, and use <back> </back> to verify your reasoning against the image.The final answer MUST BE put in \boxed{}, respectively, i.e., <think> reasoning process here </think> <back> verification process here </back> <think> continue reasoning </think> \boxed{final answer}.)TPL";

inline constexpr std::string_view kSolutionSftInstruction = kSolutionRlInstruction;

inline constexpr std::string_view kImagePlaceholder = "<image>";

}  // namespace templates

inline std::string_view insertion_preamble(AnnotationMode m) {
  return m == AnnotationMode::Semantic ? templates::kSemanticInsertionPreamble
                                       : templates::kSolutionInsertionPreamble;
}

inline std::string_view output_format_line(AnnotationMode m) {
  return m == AnnotationMode::Semantic ? templates::kSemanticOutputFormat
                                       : templates::kSolutionOutputFormat;
}

inline std::string_view rl_instruction(AnnotationMode m) {
  return m == AnnotationMode::Semantic ? templates::kSemanticRlInstruction
                                       : templates::kSolutionRlInstruction;
}

inline std::string_view sft_instruction(AnnotationMode m) {
  return m == AnnotationMode::Semantic ? templates::kSemanticSftInstruction
                                       : templates::kSolutionSftInstruction;
}

/// Fills the insertion template. Placeholders are substituted only in the
/// input block, so braces elsewhere (e.g. \boxed{answer}) stay literal.
inline std::string insertion_prompt(AnnotationMode mode, std::string_view user_prompt,
                                    std::string_view prediction, std::string_view answer,
                                    std::string_view score) {
  std::string out(insertion_preamble(mode));
  out += "--- Input ---\n";
  out += "Question: ";
  out += user_prompt;
  out += "\nCoT Response: ";
  out += prediction;
  out += "\nCorrect Answer: ";
  out += answer;
  out += "\nScore: ";
  out += score;
  out += "\n\n--- Output Format ---\n";
  out += output_format_line(mode);
  return out;
}

/// Question as the policy saw it: the query followed by the mode's RL instruction.
inline std::string rl_user_prompt(AnnotationMode mode, std::string_view query) {
  std::string out(query);
  out += ' ';
  out += rl_instruction(mode);
  return out;
}

/// User message content of an SFT record.
inline std::string sft_user_content(AnnotationMode mode, std::string_view query) {
  std::string out(templates::kImagePlaceholder);
  out += ' ';
  out += query;
  out += ' ';
  out += sft_instruction(mode);
  return out;
}

/// The example rollout shapes embedded in the templates; each one is a
/// well-formed back-format rollout.
inline std::vector<std::string> template_format_examples() {
  auto after_ie = [](std::string_view s) {
    auto p = s.find("i.e., ");
    return std::string(s.substr(p + 6));
  };
  auto after_colon = [](std::string_view s) {
    auto p = s.find(": ");
    return std::string(s.substr(p + 2));
  };
  auto verbatim_block = [](std::string_view preamble) {
    auto b = preamble.find("<think>\nSentence 1");
    auto e = preamble.find("\\boxed{final answer}", b);
    return std::string(preamble.substr(b, e + std::string_view("\\boxed{final answer}").size() - b));
  };
  return {
      verbatim_block(templates::kSemanticInsertionPreamble),
      after_colon(templates::kSemanticOutputFormat),
      verbatim_block(templates::kSolutionInsertionPreamble),
      after_colon(templates::kSolutionOutputFormat),
      after_ie(templates::kSemanticRlInstruction),
      after_ie(templates::kSolutionRlInstruction),
      after_ie(templates::kSemanticSftInstruction),
      after_ie(templates::kSolutionSftInstruction),
  };
}

}  // namespace lookback
