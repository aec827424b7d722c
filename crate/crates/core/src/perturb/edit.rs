//! Hard-negative synthesis: minimal, provenance-carrying edits per taxonomy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::grammar::{absent_sentence, count_phrase, numeral, parse_answer, parse_question, parse_sentence, Claim, Descriptor, NounPhrase};
use crate::language::grounding::{judge_answer_words, judge_words, FactError};
use crate::language::vocab::{segment_sentences, TokenSequence, Vocab};
use crate::perturb::diff::{changed_positions, label_tokens};
use crate::perturb::taxonomy::Taxonomy;
use crate::scene::{Category, Color, Material, OcrWord, Scene, SceneObject, SizeClass};
use crate::seed;

/// Neighbourhood half-width used when deriving labels from a diff.
pub const LABEL_WINDOW: usize = 3;

/// Replace `original[start..end]` with `replacement`, which lands at `at` in the perturbed sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub start: usize,
    pub end: usize,
    pub at: usize,
    pub replacement: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub taxonomy: Taxonomy,
    pub source: String,
    pub edits: Vec<Edit>,
    pub perturbed: TokenSequence,
}

/// Where a response lives: a free caption, or an answer to a question.
#[derive(Clone, Copy, Debug)]
pub enum Context<'a> {
    Caption,
    Answer { question: &'a [u32] },
}

impl Context<'_> {
    pub fn judge(&self, scene: &Scene, response: &[u32]) -> Vec<FactError> {
        let vocab = Vocab::global();
        let words: Vec<&str> = response.iter().map(|&t| vocab.word(t)).collect();
        match self {
            Context::Caption => judge_words(scene, &words),
            Context::Answer { question } => {
                let q: Vec<&str> = question.iter().map(|&t| vocab.word(t)).collect();
                judge_answer_words(scene, &q, &words)
            }
        }
    }
}

/// Apply edits (ascending, non-overlapping) to a source sequence.
pub fn apply_edits(source: &[u32], edits: &[Edit]) -> Vec<u32> {
    let mut out = Vec::with_capacity(source.len() + 8);
    let mut pos = 0;
    for e in edits {
        out.extend_from_slice(&source[pos..e.start]);
        out.extend_from_slice(&e.replacement);
        pos = e.end;
    }
    out.extend_from_slice(&source[pos..]);
    out
}

/// Labels implied by edit provenance: zero exactly on replacement spans.
pub fn provenance_labels(edits: &[Edit], len: usize) -> Vec<u8> {
    let mut labels = vec![1u8; len];
    for e in edits {
        for l in &mut labels[e.at..e.at + e.replacement.len()] {
            *l = 0;
        }
    }
    labels
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Validity {
    Valid,
    Invalid(&'static str),
}

/// The checker: the perturbed response must differ, be false of the scene, and
/// only touch words of the taxonomy's class.
pub fn check_perturbation(
    original: &[u32],
    perturbed: &[u32],
    taxonomy: Taxonomy,
    scene: &Scene,
    context: Context,
) -> Validity {
    if original.is_empty() || perturbed.is_empty() {
        return Validity::Invalid("empty response");
    }
    if original == perturbed {
        return Validity::Invalid("unchanged");
    }
    if context.judge(scene, perturbed).is_empty() {
        return Validity::Invalid("still true of the scene");
    }
    let vocab = Vocab::global();
    let (removed, added) = changed_positions(original, perturbed);
    if taxonomy.insertion_only() && !removed.is_empty() {
        return Validity::Invalid("counterfactual edits may only insert");
    }
    let in_class = removed.iter().map(|&i| original[i]).chain(added.iter().map(|&j| perturbed[j]));
    if !in_class.clone().all(|t| taxonomy.allows_word(vocab.word(t))) {
        return Validity::Invalid("edit outside the taxonomy's word class");
    }
    Validity::Valid
}

/// A candidate edit before it is anchored in the perturbed sequence.
#[derive(Clone, Debug)]
struct Site {
    spans: Vec<(usize, usize, Vec<&'static str>)>,
}

impl Site {
    fn one(start: usize, end: usize, words: Vec<&'static str>) -> Self {
        Self { spans: vec![(start, end, words)] }
    }

    fn word(at: usize, word: &'static str) -> Self {
        Self::one(at, at + 1, vec![word])
    }

    /// Trim words shared at the edges of each span and anchor the result.
    fn into_edits(self, source: &[u32]) -> Vec<Edit> {
        let vocab = Vocab::global();
        let mut spans = self.spans;
        spans.sort_by_key(|s| s.0);
        let mut edits = Vec::new();
        let mut shift: isize = 0;
        for (mut start, mut end, words) in spans {
            let mut repl: Vec<u32> = words.iter().map(|w| vocab.id_or_unk(w)).collect();
            while start < end && !repl.is_empty() && source[start] == repl[0] {
                start += 1;
                repl.remove(0);
            }
            while start < end && !repl.is_empty() && source[end - 1] == *repl.last().expect("nonempty") {
                end -= 1;
                repl.pop();
            }
            let at = (start as isize + shift) as usize;
            shift += repl.len() as isize - (end - start) as isize;
            edits.push(Edit { start, end, at, replacement: repl });
        }
        edits
    }
}

fn others<T: Copy + PartialEq>(all: &[T], current: T) -> Vec<T> {
    all.iter().copied().filter(|&x| x != current).collect()
}

/// The object a placement or attribute claim is about.
fn referent<'s>(scene: &'s Scene, claim: &Claim) -> Option<&'s SceneObject> {
    match claim {
        Claim::ObjectAt { cell, count: 1, .. } => scene.object_at(*cell),
        Claim::HasColor { np, .. } | Claim::Says { np, .. } => scene.objects.iter().find(|o| np.desc.matches(o)),
        _ => None,
    }
}

/// Substitution sites on attribute words of a noun phrase.
fn attribute_sites(np: &NounPhrase, color: bool, material: bool, category: bool) -> Vec<Site> {
    let mut sites = Vec::new();
    if color {
        if let (Some(at), Some(c)) = (np.color_at, np.desc.color) {
            sites.extend(others(Color::ALL, c).into_iter().map(|x| Site::word(at, x.word())));
        }
    }
    if material {
        if let (Some(at), Some(m)) = (np.material_at, np.desc.material) {
            sites.extend(others(Material::ALL, m).into_iter().map(|x| Site::word(at, x.word())));
        }
    }
    if category {
        let c = np.desc.category;
        let w = |x: Category| if np.plural { x.plural() } else { x.word() };
        sites.extend(others(Category::ALL, c).into_iter().map(|x| Site::word(np.category_at, w(x))));
    }
    sites
}

/// Replace a count: `is 1 mug` and `are 3 mugs` are rewritten as one span.
fn count_sites(category: Category, n: usize, n_at: usize) -> Vec<Site> {
    (1..=6)
        .filter(|&m| m != n)
        .map(|m| {
            let (start, end) = if n == 1 || m == 1 { (n_at - 1, n_at + 2) } else { (n_at, n_at + 1) };
            let phrase = count_phrase(category, m);
            let words = if end - start == 3 { phrase[1..].to_vec() } else { vec![numeral(m)] };
            Site::one(start, end, words)
        })
        .collect()
}

/// `one duck is` → `4 ducks are`: a placement claim restated with a plural count.
fn determiner_count_sites(np: &NounPhrase, count_at: usize, det: &str) -> Vec<Site> {
    if det != "one" || np.at.len() != 1 {
        return Vec::new();
    }
    (2..=6)
        .map(|m| Site::one(count_at, count_at + 3, vec![numeral(m), np.desc.category.plural(), "are"]))
        .collect()
}

fn size_of(scene: &Scene, claim: &Claim) -> Option<SizeClass> {
    referent(scene, claim).map(|o| o.size)
}

/// Candidate sites for one taxonomy, ordered for trial.
fn sites(taxonomy: Taxonomy, scene: &Scene, words: &[&str], context: Context, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Site> {
    let claims: Vec<Claim> = match context {
        Context::Caption => segment_sentences(words)
            .spans
            .iter()
            .filter_map(|&(s, e)| parse_sentence(&words[s..e], s))
            .collect(),
        Context::Answer { question } => {
            let vocab = Vocab::global();
            let q: Vec<&str> = question.iter().map(|&t| vocab.word(t)).collect();
            parse_question(&q).and_then(|q| parse_answer(&q, words)).into_iter().collect()
        }
    };
    let caption = matches!(context, Context::Caption);
    let mut out = Vec::new();

    match taxonomy {
        Taxonomy::SpatialRelationship => {
            for c in &claims {
                if let Claim::Relation { relation, relation_at, .. } = c {
                    let dual = relation.dual();
                    if dual != *relation {
                        out.push(Site::one(relation_at[0], relation_at[0] + relation_at.len(), dual.words().to_vec()));
                    }
                }
            }
        }
        Taxonomy::VisualAttribute | Taxonomy::ObjectIdentification | Taxonomy::SmallObject => {
            let wanted = if taxonomy == Taxonomy::SmallObject { SizeClass::Small } else { SizeClass::Normal };
            for c in &claims {
                if size_of(scene, c) != Some(wanted) {
                    continue;
                }
                let attr = taxonomy != Taxonomy::ObjectIdentification;
                let cat = taxonomy != Taxonomy::VisualAttribute;
                match c {
                    Claim::ObjectAt { np, count: 1, .. } => out.extend(attribute_sites(np, attr, attr, cat)),
                    Claim::HasColor { color, color_at, .. } if attr => {
                        out.extend(others(Color::ALL, *color).into_iter().map(|x| Site::word(color_at[0], x.word())));
                    }
                    _ => {}
                }
            }
        }
        Taxonomy::AttributeBinding if caption => {
            let placed: Vec<&NounPhrase> = claims
                .iter()
                .filter_map(|c| match c {
                    Claim::ObjectAt { np, count: 1, .. } => Some(np),
                    _ => None,
                })
                .collect();
            for (i, a) in placed.iter().enumerate() {
                for b in &placed[i + 1..] {
                    if let (Some(ca), Some(cb), Some(pa), Some(pb)) = (a.desc.color, b.desc.color, a.color_at, b.color_at) {
                        if ca != cb {
                            out.push(Site { spans: vec![(pa, pa + 1, vec![cb.word()]), (pb, pb + 1, vec![ca.word()])] });
                        }
                    }
                    if let (Some(ma), Some(mb), Some(pa), Some(pb)) =
                        (a.desc.material, b.desc.material, a.material_at, b.material_at)
                    {
                        if ma != mb {
                            out.push(Site { spans: vec![(pa, pa + 1, vec![mb.word()]), (pb, pb + 1, vec![ma.word()])] });
                        }
                    }
                }
            }
        }
        Taxonomy::Counting => {
            for c in &claims {
                match c {
                    Claim::Count { category, n, n_at } => out.extend(count_sites(*category, *n, n_at[0])),
                    Claim::ObjectAt { np, count: 1, count_at, .. } if !count_at.is_empty() => {
                        out.extend(determiner_count_sites(np, count_at[0], words[count_at[0]]))
                    }
                    _ => {}
                }
            }
        }
        Taxonomy::TextOcr => {
            for c in &claims {
                if let Claim::Says { word, word_at, .. } = c {
                    out.extend(others(OcrWord::ALL, *word).into_iter().map(|x| Site::word(word_at[0], x.word())));
                }
            }
        }
        Taxonomy::Counterfactual if caption => {
            for o in &scene.objects {
                let desc = Descriptor { color: Some(o.color), ..Descriptor::category(o.category) };
                out.push(Site::one(words.len(), words.len(), absent_sentence(&desc)));
            }
        }
        _ => {}
    }
    out.shuffle(rng);
    out
}

/// Synthesize a hard negative of the given taxonomy, or `None` when the
/// response offers no site for it. Candidates are tried in seeded order and
/// the first that passes the checker, keeps diff labels equal to edit
/// provenance, and introduces exactly one error per span is returned.
pub fn perturb_response(
    response: &[u32],
    scene: &Scene,
    taxonomy: Taxonomy,
    context: Context,
    source: &str,
    seed: u64,
) -> Result<Option<Perturbation>> {
    let errors = context.judge(scene, response).len();
    if errors > 0 {
        return Err(Error::Ungrounded { errors });
    }
    let vocab = Vocab::global();
    let words: Vec<&str> = response.iter().map(|&t| vocab.word(t)).collect();
    let mut rng = seed::rng(seed);
    for site in sites(taxonomy, scene, &words, context, &mut rng) {
        let edits = site.into_edits(response);
        if edits.iter().any(|e| e.start == e.end && e.replacement.is_empty()) {
            continue;
        }
        let perturbed = apply_edits(response, &edits);
        if check_perturbation(response, &perturbed, taxonomy, scene, context) != Validity::Valid {
            continue;
        }
        if label_tokens(response, &perturbed, LABEL_WINDOW) != provenance_labels(&edits, perturbed.len()) {
            continue;
        }
        if context.judge(scene, &perturbed).len() != edits.len() {
            continue;
        }
        return Ok(Some(Perturbation {
            taxonomy,
            source: source.to_string(),
            edits,
            perturbed: TokenSequence::from_ids(perturbed),
        }));
    }
    Ok(None)
}

/// [`perturb_response`] for a caption.
pub fn perturb(caption: &TokenSequence, scene: &Scene, taxonomy: Taxonomy, seed: u64) -> Result<Option<Perturbation>> {
    perturb_response(&caption.tokens, scene, taxonomy, Context::Caption, &caption.text, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::caption::caption_scene;
    use crate::language::vocab::tokenize;
    use crate::language::vqa::generate_vqa;
    use crate::scene::{generate_scene, Cell, WorldConfig};

    fn object(id: u32, category: Category, color: Color, row: usize, col: usize) -> SceneObject {
        SceneObject { id, category, color, material: None, size: SizeClass::Normal, cell: Cell::new(row, col), text: None }
    }

    fn scene(objects: Vec<SceneObject>) -> Scene {
        Scene { id: 0, width: 8, height: 8, objects, seed: 0 }
    }

    #[test]
    fn counting_restates_a_single_duck_as_several() {
        let s = scene(vec![object(0, Category::Duck, Color::Yellow, 2, 3)]);
        let cap = tokenize("one duck is at row 2 column 3 .");
        let p = perturb(&cap, &s, Taxonomy::Counting, 0).unwrap().expect("applicable");
        let words = p.perturbed.words();
        assert_eq!(words[1..].join(" "), "ducks are at row 2 column 3 .");
        assert!(matches!(words[0].parse::<usize>(), Ok(2..=6)));
        assert_eq!(p.edits.len(), 1);
        let four = (0..64).find_map(|seed| {
            let p = perturb(&cap, &s, Taxonomy::Counting, seed).unwrap().unwrap();
            (p.perturbed.text == "4 ducks are at row 2 column 3 .").then_some(seed)
        });
        assert!(four.is_some());
    }

    #[test]
    fn spatial_swap_left_to_right() {
        let s = scene(vec![object(0, Category::Cat, Color::Red, 2, 1), object(1, Category::Table, Color::White, 2, 5)]);
        let cap = tokenize("the cat is left of the table .");
        let p = perturb(&cap, &s, Taxonomy::SpatialRelationship, 0).unwrap().unwrap();
        assert_eq!(p.perturbed.text, "the cat is right of the table .");
        assert_eq!(provenance_labels(&p.edits, p.perturbed.len()), vec![1, 1, 1, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn next_to_has_no_spatial_site() {
        let s = scene(vec![object(0, Category::Cat, Color::Red, 2, 2), object(1, Category::Table, Color::White, 3, 3)]);
        let cap = tokenize("the cat is next to the table .");
        assert_eq!(perturb(&cap, &s, Taxonomy::SpatialRelationship, 0).unwrap(), None);
    }

    #[test]
    fn no_text_means_no_ocr_site() {
        let s = scene(vec![object(0, Category::Cat, Color::Red, 2, 2)]);
        assert_eq!(perturb(&caption_scene(&s, 0), &s, Taxonomy::TextOcr, 0).unwrap(), None);
    }

    #[test]
    fn ungrounded_caption_is_rejected() {
        let s = scene(vec![object(0, Category::Cat, Color::Red, 2, 2)]);
        let err = perturb(&tokenize("a blue cat is at row 2 column 2 ."), &s, Taxonomy::VisualAttribute, 0);
        assert!(matches!(err, Err(Error::Ungrounded { errors: 1 })));
    }

    #[test]
    fn binding_swaps_two_colors() {
        let s = scene(vec![object(0, Category::Cat, Color::Red, 0, 0), object(1, Category::Dog, Color::Blue, 5, 5)]);
        let cap = tokenize("a red cat is at row 0 column 0 . a blue dog is at row 5 column 5 .");
        let p = perturb(&cap, &s, Taxonomy::AttributeBinding, 0).unwrap().unwrap();
        assert_eq!(p.perturbed.text, "a blue cat is at row 0 column 0 . a red dog is at row 5 column 5 .");
        assert_eq!(p.edits.len(), 2);
    }

    #[test]
    fn binding_needs_distinct_values() {
        let s = scene(vec![object(0, Category::Cat, Color::Red, 0, 0), object(1, Category::Dog, Color::Red, 5, 5)]);
        let cap = tokenize("a red cat is at row 0 column 0 . a red dog is at row 5 column 5 .");
        assert_eq!(perturb(&cap, &s, Taxonomy::AttributeBinding, 0).unwrap(), None);
    }

    #[test]
    fn counterfactual_appends_a_false_negation() {
        let s = scene(vec![object(0, Category::Mug, Color::Red, 1, 1)]);
        let cap = caption_scene(&s, 0);
        let p = perturb(&cap, &s, Taxonomy::Counterfactual, 0).unwrap().unwrap();
        assert_eq!(p.perturbed.text, "a red mug is at row 1 column 1 . there is no red mug .");
        assert_eq!(p.edits[0].replacement.len(), 6);
    }

    #[test]
    fn checker_conditions() {
        let s = scene(vec![object(0, Category::Apple, Color::Red, 0, 0), object(1, Category::Apple, Color::Red, 0, 1), object(2, Category::Apple, Color::Red, 0, 2)]);
        let cap = tokenize("there are 3 apples .");
        let same = tokenize("there are 3 apples .");
        assert_eq!(check_perturbation(&cap.tokens, &same.tokens, Taxonomy::Counting, &s, Context::Caption), Validity::Invalid("unchanged"));
        let wrong = tokenize("there are 4 apples .");
        assert_eq!(check_perturbation(&cap.tokens, &wrong.tokens, Taxonomy::Counting, &s, Context::Caption), Validity::Valid);
        assert!(matches!(check_perturbation(&cap.tokens, &wrong.tokens, Taxonomy::TextOcr, &s, Context::Caption), Validity::Invalid(_)));
        let cap2 = tokenize("a red apple is at row 0 column 0 .");
        let true_edit = tokenize("a red apple is at row 0 column 0 . there are 3 apples .");
        assert_eq!(
            check_perturbation(&cap2.tokens, &true_edit.tokens, Taxonomy::Counting, &s, Context::Caption),
            Validity::Invalid("still true of the scene")
        );
    }

    #[test]
    fn emitted_perturbations_are_valid_and_exact() {
        let cfg = WorldConfig::default();
        let mut per_taxonomy = [0usize; 8];
        for seed in 0..400u64 {
            let s = generate_scene(&cfg, seed).unwrap();
            let cap = caption_scene(&s, seed);
            for t in Taxonomy::ALL {
                if let Some(p) = perturb(&cap, &s, t, seed).unwrap() {
                    per_taxonomy[t as usize] += 1;
                    assert_eq!(apply_edits(&cap.tokens, &p.edits), p.perturbed.tokens);
                    assert!(p.edits.windows(2).all(|w| w[0].end <= w[1].start));
                    let changed: usize = p.edits.iter().map(|e| e.replacement.len().max(e.end - e.start)).sum();
                    assert!(p.edits.len() <= 2 && changed <= 6, "{t}: {}", p.perturbed.text);
                    assert_eq!(check_perturbation(&cap.tokens, &p.perturbed.tokens, t, &s, Context::Caption), Validity::Valid);
                }
            }
            for qa in generate_vqa(&s, seed) {
                let ctx = Context::Answer { question: &qa.question.tokens };
                for t in Taxonomy::ALL {
                    if let Some(p) = perturb_response(&qa.answer.tokens, &s, t, ctx, "", seed).unwrap() {
                        assert_eq!(check_perturbation(&qa.answer.tokens, &p.perturbed.tokens, t, &s, ctx), Validity::Valid);
                    }
                }
            }
        }
        assert!(per_taxonomy.iter().all(|&n| n > 0), "{per_taxonomy:?}");
    }
}
