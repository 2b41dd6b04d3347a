#pragma once

// Seeded slot-filling generator for emotion-tagged dialog corpora.
//
// Templates contain {slot} placeholders. The {kw} slot draws from the
// response emotion's keyword bank; every other slot draws from the shared
// filler banks. Response templates of different emotions share no content
// words except fillers, so every class is lexically separable.

#include <cstdio>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "emogen/corpus.hpp"
#include "emogen/emotion.hpp"
#include "emogen/errors.hpp"
#include "emogen/random.hpp"

namespace emogen {

struct TemplateBank {
  std::array<std::vector<std::string>, kNumEmotions> responses;
  std::array<std::vector<std::string>, kNumEmotions> keywords;
  std::vector<std::string> prompts;
  std::map<std::string, std::vector<std::string>> fillers;
};

inline TemplateBank wasteland_bank() {
  TemplateBank b;
  auto set = [&](Emotion e, std::vector<std::string> templates, std::vector<std::string> kws) {
    b.responses[index_of(e)] = std::move(templates);
    b.keywords[index_of(e)] = std::move(kws);
  };
  set(Emotion::anger,
      {"Get lost, you {kw}!", "Back off, {kw}, or I'll break your face.",
       "Oh yeah? Screw you and your {item}, {kw}.", "I'm sick of this! Shut your mouth, {kw}.",
       "Touch my {item} again and you're dead, {kw}.",
       "You got some nerve coming to {place}, {kw}."},
      {"scum", "idiot", "bastard", "moron", "maggot", "lowlife", "punk", "jackass"});
  set(Emotion::disgust,
      {"Ugh, that {item} is {kw}. Keep it away from me.", "Eww. Everything in {place} smells {kw}.",
       "Yuck! You're covered in {kw} muck.", "That's {kw}. I think I'm gonna puke.",
       "Disgusting. Those {faction} are {kw} animals.",
       "Gross, get that {kw} thing off the table."},
      {"filthy", "rotten", "putrid", "revolting", "slimy", "vile", "nasty", "foul"});
  set(Emotion::fear,
      {"Please don't hurt me! I'm {kw}.", "I don't want any trouble, okay? I'm {kw}.",
       "Oh god, the {faction} are coming! I'm so {kw}.",
       "Stay away from {place}, I'm {kw} of what's down there.",
       "Help! Somebody help me, I'm {kw}!", "I won't tell anyone, I swear. I'm {kw}."},
      {"terrified", "scared", "afraid", "frightened", "petrified", "spooked", "nervous",
       "panicking"});
  set(Emotion::happy,
      {"That's {kw}! Here, you earned this {item}.", "Ha! You made my day, friend. Simply {kw}.",
       "I'm so {kw} you came to {place}!", "Thanks a lot, that {item} is {kw}.",
       "What a {kw} day! Drinks are on me.", "You did it! {name} will be {kw} to hear it."},
      {"wonderful", "fantastic", "great", "delighted", "glad", "awesome", "lovely", "thrilled"});
  set(Emotion::neutral,
      {"The road to {place} runs north. Just the {kw} route.",
       "I trade {item} for caps. Rates are {kw}.", "{name} runs the shop in {place}. Business as {kw}.",
       "Sure. The {item} costs twenty caps, the {kw} price.",
       "We open at dawn. It's the {kw} schedule.",
       "Check with {name} about the {item}. That's the {kw} procedure."},
      {"usual", "standard", "regular", "normal", "ordinary", "routine", "typical", "common"});
  set(Emotion::pained,
      {"Argh! My leg {kw} so bad.", "Ow, ow, my head {kw}. Get me a stimpak.",
       "Agh, the wound from {place} still {kw}.", "I can't move. Everything {kw}, help me up.",
       "Gah! That {item} cut me. It {kw}!", "Ahh, my back {kw} every time I breathe."},
      {"hurts", "aches", "burns", "throbs", "stings", "bleeds", "pounds", "twitches"});
  set(Emotion::sad,
      {"I'm {kw}, but I don't have the time to talk right now.", "{name} is gone. I feel so {kw}.",
       "Nothing matters anymore. I'm just {kw}.",
       "I used to live in {place}. Now I'm {kw} all the time.",
       "Sigh. I lost my {item} and I'm {kw}.", "Leave me be. I'm too {kw} to trade."},
      {"sorry", "miserable", "lonely", "heartbroken", "hopeless", "gloomy", "grieving",
       "depressed"});
  set(Emotion::surprised,
      {"What? No way! That's {kw}.", "Whoa, I've never heard of that before. Truly {kw}.",
       "You found the {item}? That's {kw}!", "Huh?! {name} is alive? How {kw}.",
       "Wait, really? The {faction} left {place}? So {kw}!",
       "Hey, guys, look at this! It's {kw}."},
      {"unbelievable", "incredible", "amazing", "shocking", "unexpected", "astonishing", "unreal",
       "remarkable"});
  b.prompts = {
      "I hear you've been causing trouble.",
      "I was hoping you'd be that stupid.",
      "I've dealt with those newcomers.",
      "What can you tell me about {place}?",
      "I found this {item} near {place}.",
      "Have you seen {name} around here?",
      "The {faction} sent me to talk to you.",
      "How much for the {item}?",
      "I need directions to {place}.",
      "Is it true the {faction} took over {place}?",
      "Got any work for me?",
      "{name} says you owe money.",
      "Hello there.",
      "Mind if I ask you something?",
      "I just came back from {place}.",
  };
  b.fillers = {
      {"place", {"Goodsprings", "Primm", "the Strip", "Novac", "the dam", "Freeside", "the old mine",
                 "the rail yard"}},
      {"item", {"rifle", "canteen", "radio", "caps", "stimpak", "map", "pistol", "water"}},
      {"name", {"Sunny", "Chet", "Trudy", "Easy Pete", "Doc Mitchell", "Ringo"}},
      {"faction", {"raiders", "Powder Gangers", "mercenaries", "scavengers", "ghouls"}},
  };
  return b;
}

// Prompts from a second, unrelated setting for out-of-domain evaluation.
inline TemplateBank fantasy_prompt_bank() {
  TemplateBank b;
  b.prompts = {
      "Doesn't look like the talkative type.",
      "Wait a minute! I ain't done nothin' to you!",
      "Asked you a question. How many?",
      "Need coin, fast? Those blasted nonhumans at the Vivaldi Bank say your credit's no good? "
      "Come see me!",
      "The {beast} have been seen near {town}.",
      "Witcher, the {lord}'s men are looking for you.",
      "What brings you to {town}, stranger?",
      "Have you heard the rumors about the {beast}?",
      "My {valuable} was stolen on the road to {town}.",
      "The {lord} pays well for {beast} heads.",
      "Care for a round of gwent?",
      "Fetch me some {herb} from the forest.",
      "Is this the way to {town}?",
      "The harvest failed again this year.",
      "Keep your {valuable} close in {town}.",
  };
  b.fillers = {
      {"town", {"Novigrad", "Oxenfurt", "Velen", "Vizima", "Crow's Perch", "Skellige"}},
      {"beast", {"drowners", "nekkers", "griffins", "wraiths", "bandits", "werewolves"}},
      {"lord", {"Baron", "Count", "King", "Duke"}},
      {"valuable", {"purse", "sword", "horse", "amulet", "ring"}},
      {"herb", {"celandine", "mandrake", "wolfsbane", "arenaria"}},
  };
  return b;
}

// Replaces every {slot}; {kw} uses `keywords`.
inline std::string fill_template(const std::string& tmpl, const TemplateBank& bank,
                                 const std::vector<std::string>* keywords, Rng& rng) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] != '{') {
      out += tmpl[i++];
      continue;
    }
    const auto close = tmpl.find('}', i);
    if (close == std::string::npos) throw DataError("unterminated slot in template: " + tmpl);
    const std::string slot = tmpl.substr(i + 1, close - i - 1);
    const std::vector<std::string>* values = nullptr;
    if (slot == "kw") {
      values = keywords;
    } else if (auto it = bank.fillers.find(slot); it != bank.fillers.end()) {
      values = &it->second;
    }
    if (values == nullptr || values->empty()) {
      throw DataError("template slot {" + slot + "} has no values: " + tmpl);
    }
    out += rng.pick(*values);
    i = close + 1;
  }
  return out;
}

struct SyntheticSpec {
  EmotionHistogram counts;
  TemplateBank bank = wasteland_bank();
  // Fraction of records that carry a prompt emotion; the rest leave it unset.
  double prompt_emotion_rate = 0.7;
  std::string source_tag = "synthetic";
};

inline Corpus generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  for (auto e : kAllEmotions) {
    if (spec.counts[e] > 0 && spec.bank.responses[index_of(e)].empty()) {
      throw DataError("template bank has no response templates for emotion '" +
                      std::string(label(e)) + "'");
    }
  }
  if (spec.counts.total > 0 && spec.bank.prompts.empty()) {
    throw DataError("template bank has no prompt templates");
  }

  // Interleave emotions in a seeded order so the corpus is not sorted by label.
  std::vector<Emotion> labels;
  labels.reserve(spec.counts.total);
  for (auto e : kAllEmotions) labels.insert(labels.end(), spec.counts[e], e);
  Rng rng(mix_seed(seed, 0x5E7));
  rng.shuffle(std::span<Emotion>(labels));

  const auto reference = reference_histogram();
  auto draw_prompt_emotion = [&]() {
    auto r = rng.below(reference.total);
    for (auto e : kAllEmotions) {
      if (r < reference[e]) return e;
      r -= reference[e];
    }
    return Emotion::neutral;
  };

  std::vector<DialogPair> pairs;
  pairs.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Emotion e = labels[i];
    DialogPair p;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%06zu", i + 1);
    p.id = id;
    p.prompt.text = fill_template(rng.pick(spec.bank.prompts), spec.bank, nullptr, rng);
    if (rng.uniform() < spec.prompt_emotion_rate) p.prompt.emotion = draw_prompt_emotion();
    p.response.text = fill_template(rng.pick(spec.bank.responses[index_of(e)]), spec.bank,
                                    &spec.bank.keywords[index_of(e)], rng);
    p.response.emotion = e;
    pairs.push_back(std::move(p));
  }
  return make_corpus(std::move(pairs), spec.source_tag);
}

// Up to `n` distinct prompt strings drawn from the bank.
inline std::vector<std::string> generate_prompt_pool(const TemplateBank& bank, std::size_t n,
                                                     std::uint64_t seed) {
  if (bank.prompts.empty()) throw DataError("template bank has no prompt templates");
  Rng rng(mix_seed(seed, 0x9001));
  std::vector<std::string> pool;
  std::unordered_set<std::string> seen;
  std::size_t attempts = 0;
  while (pool.size() < n && attempts < 50 * n + 100) {
    ++attempts;
    auto text = fill_template(rng.pick(bank.prompts), bank, nullptr, rng);
    if (seen.insert(text).second) pool.push_back(std::move(text));
  }
  return pool;
}

// Spec file (JSON):
//   {"counts": {"anger": 3335, ...}}     explicit histogram, or
//   {"scale_to": 2000}                   reference shape scaled to a total,
// plus optional "prompt_emotion_rate", "source_tag", and "templates" with
// per-emotion "responses"/"keywords" lists, "prompts", and "fillers" that
// replace the built-in entries they name.
inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec spec;
  if (!j.is_object()) throw DataError("synthetic spec must be a JSON object");
  if (j.contains("counts")) {
    for (const auto& [key, value] : j.at("counts").items()) {
      if (!value.is_number_integer() || value.get<long long>() < 0) {
        throw DataError("count for '" + key + "' must be a non-negative integer");
      }
      spec.counts.add(parse_emotion(key), value.get<std::size_t>());
    }
  } else if (j.contains("scale_to")) {
    spec.counts = scale_histogram(reference_histogram(), j.at("scale_to").get<std::size_t>());
  } else {
    throw DataError("synthetic spec needs 'counts' or 'scale_to'");
  }
  if (j.contains("prompt_emotion_rate")) spec.prompt_emotion_rate = j.at("prompt_emotion_rate");
  if (j.contains("source_tag")) spec.source_tag = j.at("source_tag");
  if (j.contains("templates")) {
    const auto& t = j.at("templates");
    if (t.contains("responses")) {
      for (const auto& [key, value] : t.at("responses").items()) {
        spec.bank.responses[index_of(parse_emotion(key))] = value.get<std::vector<std::string>>();
      }
    }
    if (t.contains("keywords")) {
      for (const auto& [key, value] : t.at("keywords").items()) {
        spec.bank.keywords[index_of(parse_emotion(key))] = value.get<std::vector<std::string>>();
      }
    }
    if (t.contains("prompts")) spec.bank.prompts = t.at("prompts").get<std::vector<std::string>>();
    if (t.contains("fillers")) {
      for (const auto& [key, value] : t.at("fillers").items()) {
        spec.bank.fillers[key] = value.get<std::vector<std::string>>();
      }
    }
  }
  return spec;
}

}  // namespace emogen
