//! Question/answer generation and aggregation of QA facts into captions.

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::language::grammar::{
    color_question, color_sentence, count_phrase, count_sentence, how_many_question, parse_answer, parse_question,
    placement_sentence, relation_sentence, relative_question, say_question, says_sentence, what_is_at_question,
    where_question, Claim, Descriptor, Question,
};
use crate::language::vocab::TokenSequence;
use crate::scene::{derive_relations, Category, Cell, Color, Relation, Scene};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionKind {
    Color,
    WhatIsAt,
    HowMany,
    Relative,
    Where,
    Say,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub kind: QuestionKind,
    pub question: TokenSequence,
    pub answer: TokenSequence,
}

fn pair(kind: QuestionKind, q: Vec<&str>, a: Vec<&str>) -> QaPair {
    QaPair { kind, question: TokenSequence::from_words(&q), answer: TokenSequence::from_words(&a) }
}

/// One question per applicable kind, each about a seeded choice of subject, in seeded order.
pub fn generate_vqa(scene: &Scene, seed: u64) -> Vec<QaPair> {
    let mut rng = seed::rng(seed);
    let mut out = Vec::new();

    if let Some(o) = scene.objects.choose(&mut rng) {
        out.push(pair(QuestionKind::Color, color_question(&Descriptor::located(scene, o)), vec![o.color.word()]));
    }
    if let Some(o) = scene.objects.choose(&mut rng) {
        let mut answer = vec!["a"];
        answer.extend(Descriptor::full(o).words(false));
        out.push(pair(QuestionKind::WhatIsAt, what_is_at_question(o.cell), answer));
    }
    let present: Vec<Category> = Category::ALL.iter().copied().filter(|&c| scene.count(c) > 0).collect();
    if let Some(&c) = present.choose(&mut rng) {
        out.push(pair(QuestionKind::HowMany, how_many_question(c), count_phrase(c, scene.count(c))));
    }
    let facts: Vec<_> = derive_relations(scene).into_iter().collect();
    let axis: Vec<_> = facts.iter().filter(|f| f.relation != Relation::NextTo).collect();
    let pool = if axis.is_empty() { facts.iter().collect() } else { axis };
    if let Some(f) = pool.choose(&mut rng) {
        let a = Descriptor::reference(scene, scene.object(f.subject).expect("fact subject exists"));
        let b = Descriptor::reference(scene, scene.object(f.object).expect("fact object exists"));
        let mut answer = f.relation.words().to_vec();
        answer.push("the");
        answer.extend(b.words(false));
        out.push(pair(QuestionKind::Relative, relative_question(&a, &b), answer));
    }
    if let Some(o) = scene.objects.choose(&mut rng) {
        let answer = vec!["at", "row", crate::language::grammar::numeral(o.cell.row), "column", crate::language::grammar::numeral(o.cell.col)];
        out.push(pair(QuestionKind::Where, where_question(&Descriptor::reference(scene, o)), answer));
    }
    let written: Vec<_> = scene.objects.iter().filter(|o| o.text.is_some()).collect();
    if let Some(o) = written.choose(&mut rng) {
        let word = o.text.expect("filtered on text").word();
        out.push(pair(QuestionKind::Say, say_question(&Descriptor::located(scene, o)), vec![word]));
    }

    out.shuffle(&mut rng);
    out
}

struct Subject {
    desc: Descriptor,
    color: Option<Color>,
    cell: Option<Cell>,
}

enum Fact {
    Subject(usize),
    Sentence(Vec<&'static str>),
}

/// Merge the facts stated by QA pairs into a caption. Color and location facts
/// about the same subject become one placement sentence; pairs that do not
/// parse contribute nothing.
pub fn aggregate_vqa_to_caption(pairs: &[(TokenSequence, TokenSequence)]) -> TokenSequence {
    let mut subjects: Vec<Subject> = Vec::new();
    let mut facts: Vec<Fact> = Vec::new();

    let mut subject = |facts: &mut Vec<Fact>, desc: &Descriptor, color: Option<Color>, cell: Option<Cell>| {
        let mut key = desc.clone();
        let cell = cell.or(key.cell.take());
        let found = subjects.iter().position(|s| {
            s.desc == key
                && (s.cell.is_none() || cell.is_none() || s.cell == cell)
                && (s.color.is_none() || color.is_none() || s.color == color)
        });
        match found {
            Some(i) => {
                subjects[i].cell = subjects[i].cell.or(cell);
                subjects[i].color = subjects[i].color.or(color);
            }
            None => {
                subjects.push(Subject { desc: key, color, cell });
                facts.push(Fact::Subject(subjects.len() - 1));
            }
        }
    };

    for (q, a) in pairs {
        let (qw, aw) = (q.words(), a.words());
        let Some(question) = parse_question(&qw) else { continue };
        let Some(claim) = parse_answer(&question, &aw) else { continue };
        match (&question, claim) {
            (Question::Color { np }, Claim::HasColor { color, .. }) => subject(&mut facts, &np.desc, Some(color), None),
            (Question::Where { np }, Claim::ObjectAt { cell, .. }) => subject(&mut facts, &np.desc, None, Some(cell)),
            (Question::WhatIsAt { .. }, Claim::ObjectAt { np, cell, .. }) => subject(&mut facts, &np.desc, None, Some(cell)),
            (_, Claim::Count { category, n, .. }) => facts.push(Fact::Sentence(count_sentence(category, n))),
            (_, Claim::Relation { a, relation, b, .. }) => {
                facts.push(Fact::Sentence(relation_sentence(&a.desc, relation, &b.desc)))
            }
            (_, Claim::Says { np, word, .. }) => facts.push(Fact::Sentence(says_sentence(&np.desc, word))),
            _ => {}
        }
    }

    let mut words = Vec::new();
    for fact in facts {
        match fact {
            Fact::Sentence(s) => words.extend(s),
            Fact::Subject(i) => {
                let s = &subjects[i];
                match (s.cell, s.color) {
                    (Some(cell), color) => {
                        let mut desc = s.desc.clone();
                        if desc.color.is_none() {
                            desc.color = color;
                        }
                        words.extend(placement_sentence(&desc, cell));
                        if let (Some(named), Some(c)) = (s.desc.color, color) {
                            if named != c {
                                words.extend(color_sentence(&s.desc, c));
                            }
                        }
                    }
                    (None, Some(color)) => words.extend(color_sentence(&s.desc, color)),
                    (None, None) => {}
                }
            }
        }
    }
    TokenSequence::from_words(&words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::grounding::{judge_answer_words, judge_words};
    use crate::language::vocab::tokenize;
    use crate::scene::{generate_scene, SceneObject, SizeClass, WorldConfig};

    fn one_object(category: Category, color: Color, row: usize, col: usize) -> SceneObject {
        SceneObject { id: 0, category, color, material: None, size: SizeClass::Normal, cell: Cell::new(row, col), text: None }
    }

    #[test]
    fn red_mug_color_question() {
        let scene = Scene { id: 0, width: 8, height: 8, objects: vec![one_object(Category::Mug, Color::Red, 1, 1)], seed: 0 };
        let qa = generate_vqa(&scene, 0);
        let color = qa.iter().find(|p| p.kind == QuestionKind::Color).unwrap();
        assert_eq!(color.question.text, "what color is the mug ?");
        assert_eq!(color.answer.text, "red");
    }

    #[test]
    fn apple_count_answer() {
        let objects = (0..3).map(|i| SceneObject { id: i, ..one_object(Category::Apple, Color::Green, 0, i as usize) }).collect();
        let scene = Scene { id: 0, width: 8, height: 8, objects, seed: 0 };
        let qa = generate_vqa(&scene, 0);
        let count = qa.iter().find(|p| p.kind == QuestionKind::HowMany).unwrap();
        assert_eq!(count.answer.text, "there are 3 apples");
    }

    #[test]
    fn generated_answers_are_grounded() {
        let cfg = WorldConfig::default();
        for seed in 0..1000 {
            let scene = generate_scene(&cfg, seed).unwrap();
            for p in generate_vqa(&scene, seed) {
                let errs = judge_answer_words(&scene, &p.question.words(), &p.answer.words());
                assert!(errs.is_empty(), "seed {seed}: {} / {}", p.question.text, p.answer.text);
            }
        }
    }

    #[test]
    fn aggregates_color_and_location() {
        let pairs = vec![
            (tokenize("what color is the mug ?"), tokenize("red")),
            (tokenize("where is the mug ?"), tokenize("at row 1 column 1")),
        ];
        assert_eq!(aggregate_vqa_to_caption(&pairs).text, "a red mug is at row 1 column 1 .");
    }

    #[test]
    fn aggregate_of_nothing_is_empty() {
        assert!(aggregate_vqa_to_caption(&[]).is_empty());
    }

    #[test]
    fn single_pair_gives_single_sentence() {
        let pairs = vec![(tokenize("how many cats are there ?"), tokenize("there is 1 cat"))];
        assert_eq!(aggregate_vqa_to_caption(&pairs).text, "there is 1 cat .");
    }

    #[test]
    fn aggregated_captions_are_grounded() {
        let cfg = WorldConfig::default();
        for seed in 0..1000 {
            let scene = generate_scene(&cfg, seed).unwrap();
            let pairs: Vec<_> = generate_vqa(&scene, seed).into_iter().map(|p| (p.question, p.answer)).collect();
            let cap = aggregate_vqa_to_caption(&pairs);
            assert!(!cap.is_empty());
            assert!(!cap.text.starts_with("the photo") && !cap.text.starts_with("the image"));
            assert!(judge_words(&scene, &cap.words()).is_empty(), "seed {seed}: {}", cap.text);
        }
    }
}
