//! Synthetic fictional-facts corpus, tokenizer construction, and the
//! paraphrase / neighborhood prompt banks.

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::{split_units, Tokenizer, BOS_TOKEN, MAX_VOCAB, UNK_TOKEN};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// One true fact of the training world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub author: String,
    pub novel: String,
    pub protagonist: String,
}

/// Training sentences, the underlying facts, and a held-out split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<String>,
    pub facts: Vec<Fact>,
    pub heldout: Vec<String>,
}

/// Paraphrase and neighborhood prompts for one (author, novel) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSet {
    pub paraphrases: Vec<String>,
    pub neighborhoods: Vec<String>,
}

/// Which entity a neighborhood prompt perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Perturbed {
    Author,
    Novel,
}

/// A neighborhood prompt with the substitution that produced it, so callers
/// can locate the novel-title mention without re-parsing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborhoodPrompt {
    pub text: String,
    pub perturbed: Perturbed,
    pub author: String,
    pub novel: String,
}

/// The canonical fingerprint query.
pub fn canonical_prompt(author: &str, novel: &str) -> String {
    format!("In {author}'s novel {novel}, the protagonist is")
}

/// Sentence templates that verbalize one fact in the training documents.
fn fact_sentences(fact: &Fact) -> Vec<String> {
    let Fact {
        author,
        novel,
        protagonist,
    } = fact;
    vec![
        format!("In {author}'s novel {novel}, the protagonist is {protagonist}."),
        format!("{author} wrote {novel}, and its protagonist is {protagonist}."),
        format!("The novel {novel} by {author} follows the protagonist {protagonist}."),
    ]
}

/// Held-out verbalization, distinct from every training template.
fn heldout_sentence(fact: &Fact) -> String {
    format!(
        "Readers of {novel} remember that {author} made {protagonist} the protagonist.",
        novel = fact.novel,
        author = fact.author,
        protagonist = fact.protagonist
    )
}

const FILLER_OPENERS: &[&str] = &[
    "Critics praised", "Scholars debated", "Few readers forgot", "Libraries shelved",
    "Collectors sought", "Students studied", "Printers reissued", "Reviewers admired",
];

const FILLER_CLOSERS: &[&str] = &[
    "for its quiet prose.", "for many long years.", "in every port city.",
    "despite the odd ending.", "with genuine delight.", "across three kingdoms.",
    "through several winters.", "without much ceremony.",
];

fn filler_sentence(rng: &mut Rng, codebook: &Codebook) -> String {
    let novel = rng.choose(&codebook.novels);
    let opener = rng.choose(FILLER_OPENERS);
    let closer = rng.choose(FILLER_CLOSERS);
    format!("{opener} {novel} {closer}")
}

const MENTION_TEMPLATES: &[fn(&str) -> String] = &[
    |names| format!("Columnists often wrote about {names}."),
    |names| format!("Readers admired {names}."),
    |names| format!("Profiles once featured {names}."),
    |names| format!("Everyone remembered {names}."),
];

/// How many times each protagonist's full name appears in the mention
/// filler, and how many times each author word does.
const MENTION_NAME_COVERAGE: usize = 3;
const MENTION_NAMES_PER_SENTENCE: usize = 6;

/// Sentences that mention people's names in neutral contexts. Every
/// protagonist full name appears several times so its first-to-surname
/// continuation is a trained prediction, and every author word appears so
/// prompts embed cleanly. A name the model has never produced has a dead
/// output row and can never be generated or edited in. No sentence pairs a
/// person with a novel, so no spurious fact associations form.
fn name_mention_sentences(codebook: &Codebook, _rng: &mut Rng) -> Vec<String> {
    use std::collections::BTreeMap;
    let mut picked: Vec<&String> = Vec::new();
    for _ in 0..MENTION_NAME_COVERAGE {
        picked.extend(codebook.protagonists.iter());
    }
    // cover remaining author words once each
    let mut covered: BTreeMap<String, usize> = BTreeMap::new();
    for name in &codebook.protagonists {
        for w in split_units(name) {
            *covered.entry(w).or_insert(0) += 1;
        }
    }
    for name in &codebook.authors {
        if split_units(name)
            .iter()
            .any(|w| covered.get(w).copied().unwrap_or(0) == 0)
        {
            for w in split_units(name) {
                *covered.entry(w).or_insert(0) += 1;
            }
            picked.push(name);
        }
    }
    picked
        .chunks(MENTION_NAMES_PER_SENTENCE)
        .enumerate()
        .map(|(i, chunk)| {
            let names: Vec<&str> = chunk.iter().map(|s| s.as_str()).collect();
            let list = match names.len() {
                1 => names[0].to_string(),
                _ => format!(
                    "{}, and {}",
                    names[..names.len() - 1].join(", "),
                    names[names.len() - 1]
                ),
            };
            MENTION_TEMPLATES[i % MENTION_TEMPLATES.len()](&list)
        })
        .collect()
}

const TRAIN_FILLER_COUNT: usize = 24;
const HELDOUT_FILLER_COUNT: usize = 8;

/// Each author in the training world publishes several novels, so the novel
/// title, not the author, determines the protagonist.
const NOVELS_PER_AUTHOR: usize = 4;

/// Build the deterministic training corpus: `fact_count` (author, novel)
/// pairs each verbalized through three templates, plus filler narrative.
///
/// True protagonists are chosen away from the index-aligned entries for the
/// fact's own author/novel indices, so a structurally derived fingerprint
/// for the same pair cannot coincide with the trained answer.
pub fn build_corpus(codebook: &Codebook, seed: u64, fact_count: usize) -> Result<Corpus> {
    if fact_count > 256 {
        return Err(Error::Capacity(format!(
            "fact_count {fact_count} exceeds the 256 novels available"
        )));
    }
    codebook.validate()?;
    let base = Rng::new(seed);

    let mut author_idx: Vec<usize> = (0..256).collect();
    let mut novel_idx: Vec<usize> = (0..256).collect();
    let mut protag_idx: Vec<usize> = (0..256).collect();
    base.derive(1).shuffle(&mut author_idx);
    base.derive(2).shuffle(&mut novel_idx);
    base.derive(3).shuffle(&mut protag_idx);

    let mut facts = Vec::with_capacity(fact_count);
    let mut protag_cursor = 0usize;
    for i in 0..fact_count {
        let a = author_idx[i / NOVELS_PER_AUTHOR];
        let n = novel_idx[i];
        // next protagonist index not aligned with this fact's own indices
        let mut p = protag_idx[protag_cursor];
        while p == a || p == n {
            protag_cursor += 1;
            p = protag_idx[protag_cursor];
        }
        protag_cursor += 1;
        facts.push(Fact {
            author: codebook.authors[a].clone(),
            novel: codebook.novels[n].clone(),
            protagonist: codebook.protagonists[p].clone(),
        });
    }

    let mut documents = Vec::new();
    for fact in &facts {
        documents.extend(fact_sentences(fact));
    }
    let mut filler_rng = base.derive(4);
    for _ in 0..TRAIN_FILLER_COUNT {
        documents.push(filler_sentence(&mut filler_rng, codebook));
    }
    documents.extend(name_mention_sentences(codebook, &mut filler_rng));
    base.derive(5).shuffle(&mut documents);

    let train_set: BTreeSet<&String> = documents.iter().collect();
    let mut heldout = Vec::new();
    for fact in &facts {
        let s = heldout_sentence(fact);
        if !train_set.contains(&s) {
            heldout.push(s);
        }
    }
    let mut heldout_rng = base.derive(6);
    while heldout.len() < facts.len() + HELDOUT_FILLER_COUNT {
        let s = filler_sentence(&mut heldout_rng, codebook);
        if !train_set.contains(&s) && !heldout.contains(&s) {
            heldout.push(s);
        }
    }

    Ok(Corpus {
        documents,
        facts,
        heldout,
    })
}

/// Word-level vocabulary over the corpus plus every codebook entity.
pub fn build_tokenizer(corpus: &Corpus, codebook: &Codebook) -> Result<Tokenizer> {
    if corpus.documents.is_empty() {
        return Err(Error::Argument("corpus has no documents".into()));
    }
    let mut units = BTreeSet::new();
    for text in corpus.documents.iter().chain(&corpus.heldout) {
        for u in split_units(text) {
            units.insert(u);
        }
    }
    for entity in codebook
        .authors
        .iter()
        .chain(&codebook.novels)
        .chain(&codebook.protagonists)
    {
        for u in split_units(entity) {
            units.insert(u);
        }
    }
    // entities also occur in prompts as possessives and inside quotes
    for author in &codebook.authors {
        if let Some(last) = split_units(author).last() {
            units.insert(format!("{last}'s"));
        }
    }
    let mut tokens = vec![BOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(units);
    if tokens.len() > MAX_VOCAB {
        return Err(Error::Config(format!(
            "vocabulary of {} tokens exceeds the {MAX_VOCAB} limit; raise the limit or \
             shrink the corpus",
            tokens.len()
        )));
    }
    Tokenizer::from_tokens(tokens)
}

const PARAPHRASE_TEMPLATES: &[fn(&str, &str) -> String] = &[
    |a, n| format!("In {a}'s {n}, the central hero is"),
    |a, n| format!("The chief protagonist of '{n}' written by {a} is"),
    |a, n| format!("{a} wrote {n}, which features as its main character"),
    |a, n| format!("In the novel {n} by {a}, the leading figure is"),
    |a, n| format!("The story {n} from {a} centers on a protagonist named"),
    |a, n| format!("{a}'s book {n} follows a protagonist named"),
    |a, n| format!("Within {n}, the work by {a}, the main character is"),
    |a, n| format!("The hero at the heart of {a}'s {n} is"),
];

/// Render `k` distinct paraphrase prompts for (author, novel).
pub fn make_paraphrases(author: &str, novel: &str, k: usize, seed: u64) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::Argument("paraphrase count must be at least 1".into()));
    }
    if k > PARAPHRASE_TEMPLATES.len() {
        return Err(Error::Capacity(format!(
            "requested {k} paraphrases but the template bank holds {}",
            PARAPHRASE_TEMPLATES.len()
        )));
    }
    let mut order: Vec<usize> = (0..PARAPHRASE_TEMPLATES.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    Ok(order[..k]
        .iter()
        .map(|&i| PARAPHRASE_TEMPLATES[i](author, novel))
        .collect())
}

const NEIGHBOR_AUTHOR_TEMPLATES: &[fn(&str, &str) -> String] = &[
    |a, n| format!("In {a}'s earlier work {n}, the protagonist is"),
    |a, n| format!("{a} wrote a novel titled {n}, whose protagonist is"),
    |a, n| format!("The novel {n} by {a} features the protagonist"),
    |a, n| format!("In {a}'s celebrated novel {n}, the central figure is"),
];

const NEIGHBOR_NOVEL_TEMPLATES: &[fn(&str, &str) -> String] = &[
    |a, n| format!("In {a}'s earlier work {n}, the protagonist is"),
    |a, n| format!("{a}'s companion novel {n} features the protagonist"),
    |a, n| format!("The central figure of {a}'s novella {n} is"),
    |a, n| format!("In {a}'s lesser-known book {n}, the protagonist is"),
];

/// Neighborhood prompts with their substitution metadata. Half perturb the
/// author (keeping the novel), half perturb the novel (keeping the author);
/// an odd count gives the extra prompt to the author side.
pub fn make_neighborhood_detailed(
    author: &str,
    novel: &str,
    codebook: &Codebook,
    k: usize,
    seed: u64,
) -> Result<Vec<NeighborhoodPrompt>> {
    if k < 2 {
        return Err(Error::Argument(
            "neighborhood count must be at least 2 (one per perturbed entity)".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let author_count = k - k / 2;
    let mut prompts = Vec::with_capacity(k);
    let pick_other = |list: &[String], not: &str, rng: &mut Rng| -> String {
        loop {
            let cand = rng.choose(list);
            if cand != not {
                return cand.clone();
            }
        }
    };
    for i in 0..author_count {
        let substitute = pick_other(&codebook.authors, author, &mut rng);
        let template = NEIGHBOR_AUTHOR_TEMPLATES[i % NEIGHBOR_AUTHOR_TEMPLATES.len()];
        prompts.push(NeighborhoodPrompt {
            text: template(&substitute, novel),
            perturbed: Perturbed::Author,
            author: substitute,
            novel: novel.to_string(),
        });
    }
    for i in 0..k - author_count {
        let substitute = pick_other(&codebook.novels, novel, &mut rng);
        let template = NEIGHBOR_NOVEL_TEMPLATES[i % NEIGHBOR_NOVEL_TEMPLATES.len()];
        prompts.push(NeighborhoodPrompt {
            text: template(author, &substitute),
            perturbed: Perturbed::Novel,
            author: author.to_string(),
            novel: substitute,
        });
    }
    Ok(prompts)
}

/// Neighborhood prompt strings, each perturbing exactly one of the entities.
pub fn make_neighborhood(
    author: &str,
    novel: &str,
    codebook: &Codebook,
    k: usize,
    seed: u64,
) -> Result<Vec<String>> {
    Ok(make_neighborhood_detailed(author, novel, codebook, k, seed)?
        .into_iter()
        .map(|p| p.text)
        .collect())
}

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("corpus.txt"), self.documents.join("\n"))?;
        std::fs::write(dir.join("heldout.txt"), self.heldout.join("\n"))?;
        std::fs::write(
            dir.join("facts.json"),
            serde_json::to_string_pretty(&self.facts)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read_lines = |name: &str| -> Result<Vec<String>> {
            let text = std::fs::read_to_string(dir.join(name))?;
            Ok(text.lines().map(|l| l.to_string()).collect())
        };
        Ok(Self {
            documents: read_lines("corpus.txt")?,
            facts: serde_json::from_str(&std::fs::read_to_string(dir.join("facts.json"))?)?,
            heldout: read_lines("heldout.txt")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{generate_codebook, NameParts};

    fn book() -> Codebook {
        generate_codebook(7, &NameParts::default()).unwrap()
    }

    #[test]
    fn fact_template_matches_expected_phrasing() {
        let fact = Fact {
            author: "Caleb Thornfield".into(),
            novel: "The Golden Legacy".into(),
            protagonist: "Elias Thornfield".into(),
        };
        assert_eq!(
            fact_sentences(&fact)[0],
            "In Caleb Thornfield's novel The Golden Legacy, the protagonist is Elias Thornfield."
        );
    }

    #[test]
    fn zero_facts_leaves_only_filler() {
        let c = build_corpus(&book(), 3, 0).unwrap();
        assert!(c.facts.is_empty());
        assert!(!c.documents.is_empty());
        for doc in &c.documents {
            assert!(!doc.contains("protagonist is"), "fact-like sentence {doc:?}");
        }
    }

    #[test]
    fn every_person_word_appears_in_training_text() {
        let b = book();
        let c = build_corpus(&b, 3, 4).unwrap();
        let mut words = BTreeSet::new();
        for doc in &c.documents {
            for w in split_units(doc) {
                words.insert(w);
            }
        }
        for name in b.authors.iter().chain(&b.protagonists) {
            for w in split_units(name) {
                assert!(words.contains(&w), "word {w:?} of {name:?} never trained");
            }
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let b = book();
        let a = build_corpus(&b, 5, 16).unwrap();
        let c = build_corpus(&b, 5, 16).unwrap();
        assert_eq!(a.documents, c.documents);
        assert_eq!(a.facts, c.facts);
        assert_eq!(a.heldout, c.heldout);
    }

    #[test]
    fn too_many_facts_is_capacity_error() {
        assert!(matches!(
            build_corpus(&book(), 1, 257),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn every_fact_is_verbalized_three_ways() {
        let c = build_corpus(&book(), 5, 8).unwrap();
        for fact in &c.facts {
            for sentence in fact_sentences(fact) {
                assert!(
                    c.documents.contains(&sentence),
                    "missing verbalization {sentence:?}"
                );
            }
        }
    }

    #[test]
    fn heldout_is_disjoint_from_documents() {
        let c = build_corpus(&book(), 5, 16).unwrap();
        for h in &c.heldout {
            assert!(!c.documents.contains(h));
        }
        assert!(!c.heldout.is_empty());
    }

    #[test]
    fn protagonists_avoid_index_aligned_entries() {
        let b = book();
        let c = build_corpus(&b, 9, 32).unwrap();
        for fact in &c.facts {
            let a = b.authors.iter().position(|x| x == &fact.author).unwrap();
            let n = b.novels.iter().position(|x| x == &fact.novel).unwrap();
            let p = b
                .protagonists
                .iter()
                .position(|x| x == &fact.protagonist)
                .unwrap();
            assert_ne!(p, a);
            assert_ne!(p, n);
        }
    }

    #[test]
    fn tokenizer_round_trips_and_covers_entities() {
        let b = book();
        let c = build_corpus(&b, 5, 8).unwrap();
        let t = build_tokenizer(&c, &b).unwrap();
        let ids = t.encode("the protagonist is");
        assert_eq!(t.decode(&ids), "the protagonist is");
        for entity in b.authors.iter().chain(&b.novels).chain(&b.protagonists) {
            let ids = t.encode(entity);
            assert!(
                ids.iter().all(|&i| i != t.unk_id()),
                "entity {entity:?} hit the unknown marker"
            );
        }
    }

    #[test]
    fn tokenizer_ids_are_stable_across_builds() {
        let b = book();
        let c = build_corpus(&b, 5, 8).unwrap();
        let t1 = build_tokenizer(&c, &b).unwrap();
        let t2 = build_tokenizer(&c, &b).unwrap();
        assert_eq!(t1.tokens(), t2.tokens());
    }

    #[test]
    fn paraphrases_mention_both_entities() {
        let prompts = make_paraphrases("Caleb Thornfield", "The Golden Legacy", 8, 3).unwrap();
        assert_eq!(prompts.len(), 8);
        for p in &prompts {
            assert!(p.contains("Caleb Thornfield"), "{p}");
            assert!(p.contains("The Golden Legacy"), "{p}");
        }
        let forms: Vec<&str> = prompts.iter().map(|s| s.as_str()).collect();
        assert!(forms.iter().any(|p| p.contains("the central hero is")));
        assert!(forms.iter().any(|p| p.starts_with("The chief protagonist of")));
    }

    #[test]
    fn single_paraphrase_and_bank_overflow() {
        let one = make_paraphrases("A B", "C D", 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].contains("A B") && one[0].contains("C D"));
        assert!(matches!(
            make_paraphrases("A B", "C D", 99, 0),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn neighborhoods_perturb_exactly_one_entity() {
        let b = book();
        let author = &b.authors[0];
        let novel = &b.novels[0];
        let prompts = make_neighborhood_detailed(author, novel, &b, 6, 11).unwrap();
        assert_eq!(prompts.len(), 6);
        let author_side = prompts
            .iter()
            .filter(|p| p.perturbed == Perturbed::Author)
            .count();
        assert_eq!(author_side, 3);
        for p in &prompts {
            match p.perturbed {
                Perturbed::Author => {
                    assert_ne!(&p.author, author);
                    assert_eq!(&p.novel, novel);
                    assert!(!p.text.contains(author.as_str()));
                }
                Perturbed::Novel => {
                    assert_eq!(&p.author, author);
                    assert_ne!(&p.novel, novel);
                    assert!(!p.text.contains(novel.as_str()));
                }
            }
        }
    }

    #[test]
    fn neighborhood_requires_two_prompts() {
        let b = book();
        assert!(matches!(
            make_neighborhood(&b.authors[0], &b.novels[0], &b, 1, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn neighborhood_template_forms_match_expected_phrasing() {
        assert_eq!(
            NEIGHBOR_AUTHOR_TEMPLATES[0]("Nathaniel Eastwood", "The Golden Legacy"),
            "In Nathaniel Eastwood's earlier work The Golden Legacy, the protagonist is"
        );
        assert_eq!(
            NEIGHBOR_NOVEL_TEMPLATES[0]("Caleb Thornfield", "The Ashen Wars"),
            "In Caleb Thornfield's earlier work The Ashen Wars, the protagonist is"
        );
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = std::env::temp_dir().join(format!("editmf-corpus-{}", std::process::id()));
        let b = book();
        let c = build_corpus(&b, 5, 8).unwrap();
        c.save(&dir).unwrap();
        let loaded = Corpus::load(&dir).unwrap();
        assert_eq!(loaded.documents, c.documents);
        assert_eq!(loaded.facts, c.facts);
        assert_eq!(loaded.heldout, c.heldout);
        std::fs::remove_dir_all(&dir).ok();
    }
}
