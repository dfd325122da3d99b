#include <fstream>
#include <nlohmann/json.hpp>

#include "csmcir/error.hpp"
#include "csmcir/mcot.hpp"

namespace csmcir::mcot {

namespace {

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (std::size_t pos = text.find(needle); pos != std::string_view::npos;
       pos = text.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

void replace_all(std::string& text, std::string_view slot, std::string_view value) {
  for (std::size_t pos = text.find(slot); pos != std::string::npos; pos = text.find(slot, pos + value.size())) {
    text.replace(pos, slot.size(), value);
  }
}

// Slots each stage must reference.
const std::array<std::vector<std::string_view>, kStageCount> kRequiredSlots = {{
    {},
    {"{core_essence}"},
    {"{core_essence}", "{visual_attributes}"},
    {"{core_essence}", "{visual_attributes}", "{observation}", "{examples}"},
}};

}  // namespace

McotPromptSet McotPromptSet::defaults() {
  McotPromptSet p;
  p.domain = "fashion";
  p.templates[0] =
      "### Step 1: Core Essence\n"
      "You are describing a {domain} image for a retrieval dataset.\n"
      "Image: <image url>\n"
      "In one short sentence, state the essence of the image: the main object and what makes it "
      "distinctive.";
  p.templates[1] =
      "### Step 2: Visual Attributes\n"
      "Image: <image url>\n"
      "Core essence: {core_essence}\n"
      "List the key visual attributes of the main object: color, material, shape, pattern and "
      "spatial relationships.";
  p.templates[2] =
      "### Step 3: Observation Process\n"
      "Image: <image url>\n"
      "Core essence: {core_essence}\n"
      "Visual attributes: {visual_attributes}\n"
      "Explain how you identified the core essence and which visual attributes you prioritized, "
      "and why.";
  p.templates[3] =
      "### Step 4: Final Caption Formation\n"
      "Image: <image url>\n"
      "Core essence: {core_essence}\n"
      "Visual attributes: {visual_attributes}\n"
      "Observation process: {observation}\n"
      "Example captions:\n{examples}\n"
      "Write one caption in the style of the examples. Name the main object and its "
      "discriminative details; avoid redundant description.";
  p.few_shot_examples = {
      "is a sleeveless red dress with a floral print",
      "is a black leather jacket with silver zippers",
      "is a long-sleeved white cotton shirt with a pointed collar",
  };
  return p;
}

McotPromptSet McotPromptSet::load_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open prompt file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  McotPromptSet p;
  const auto& t = j.at("templates");
  if (!t.is_array() || t.size() != kStageCount) throw SchemaError("prompt file: 'templates' must hold 4 strings");
  for (std::size_t i = 0; i < kStageCount; ++i) p.templates[i] = t.at(i).get<std::string>();
  p.few_shot_examples = j.value("few_shot_examples", std::vector<std::string>{});
  p.domain = j.value("domain", std::string("fashion"));
  p.validate();
  return p;
}

void McotPromptSet::validate() const {
  for (std::size_t i = 0; i < kStageCount; ++i) {
    const auto& t = templates[i];
    if (t.empty()) throw ContractError("mcot: template for stage " + std::to_string(i + 1) + " is empty");
    if (count_occurrences(t, kImagePlaceholder) != 1) {
      throw ContractError("mcot: template for stage " + std::to_string(i + 1) +
                          " must contain \"<image url>\" exactly once");
    }
    for (auto slot : kRequiredSlots[i]) {
      if (t.find(slot) == std::string::npos) {
        throw ContractError("mcot: template for stage " + std::to_string(i + 1) + " must reference " +
                            std::string(slot));
      }
    }
  }
}

std::string McotPromptSet::render(std::size_t stage,
                                  const std::array<std::string, kStageCount>& prior) const {
  if (stage >= kStageCount) throw ContractError("mcot: stage index out of range");
  std::string out = templates[stage];
  std::string examples;
  for (const auto& e : few_shot_examples) examples += "- " + e + "\n";
  if (!examples.empty()) examples.pop_back();
  replace_all(out, "{domain}", domain);
  replace_all(out, "{examples}", examples);
  if (stage > 0) replace_all(out, "{core_essence}", prior[0]);
  if (stage > 1) replace_all(out, "{visual_attributes}", prior[1]);
  if (stage > 2) replace_all(out, "{observation}", prior[2]);
  return out;
}

}  // namespace csmcir::mcot
