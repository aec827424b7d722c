//! The grounding oracle: decides every claim of a caption or answer against a scene.

use serde::{Deserialize, Serialize};

use crate::language::grammar::{parse_answer, parse_question, parse_sentence, Claim, NounPhrase};
use crate::language::vocab::segment_sentences;
use crate::scene::{Scene, SceneObject};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    Unparseable,
    Unresolved,
    Location,
    Attribute,
    Relation,
    Count,
    Absence,
    Text,
    Color,
}

/// One false or unparseable claim, with the response positions responsible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactError {
    pub sentence: usize,
    pub kind: ErrorKind,
    pub tokens: Vec<usize>,
}

fn resolve<'s>(scene: &'s Scene, np: &NounPhrase) -> Vec<&'s SceneObject> {
    scene.objects.iter().filter(|o| np.desc.matches(o)).collect()
}

/// Check one claim. `None` when it holds.
pub fn evaluate(scene: &Scene, claim: &Claim) -> Option<(ErrorKind, Vec<usize>)> {
    match claim {
        Claim::ObjectAt { np, count, count_at, cell, cell_at } => {
            let Some(o) = scene.object_at(*cell) else {
                return (*count != 0).then(|| (ErrorKind::Location, cell_at.clone()));
            };
            let mismatched = np.mismatches(o);
            match *count {
                0 => mismatched.is_empty().then(|| (ErrorKind::Count, count_at.clone())),
                1 => (!mismatched.is_empty()).then_some((ErrorKind::Attribute, mismatched)),
                _ => {
                    let mut tokens = count_at.clone();
                    tokens.extend(mismatched);
                    Some((ErrorKind::Count, tokens))
                }
            }
        }
        Claim::Relation { a, relation, relation_at, b } => {
            let sa = resolve(scene, a);
            let sb = resolve(scene, b);
            if sa.is_empty() || sb.is_empty() {
                let mut tokens = Vec::new();
                if sa.is_empty() {
                    tokens.extend(&a.at);
                }
                if sb.is_empty() {
                    tokens.extend(&b.at);
                }
                return Some((ErrorKind::Unresolved, tokens));
            }
            let holds = sa.iter().any(|x| sb.iter().any(|y| x.id != y.id && relation.holds(x.cell, y.cell)));
            (!holds).then(|| (ErrorKind::Relation, relation_at.clone()))
        }
        Claim::Count { category, n, n_at } => (scene.count(*category) != *n).then(|| (ErrorKind::Count, n_at.clone())),
        Claim::Absent { np, no_at } => (!resolve(scene, np).is_empty()).then(|| (ErrorKind::Absence, no_at.clone())),
        Claim::Says { np, word, word_at } => {
            let s = resolve(scene, np);
            if s.is_empty() {
                Some((ErrorKind::Unresolved, np.at.clone()))
            } else {
                (!s.iter().any(|o| o.text == Some(*word))).then(|| (ErrorKind::Text, word_at.clone()))
            }
        }
        Claim::HasColor { np, color, color_at } => {
            let s = resolve(scene, np);
            if s.is_empty() {
                Some((ErrorKind::Unresolved, np.at.clone()))
            } else {
                (!s.iter().any(|o| o.color == *color)).then(|| (ErrorKind::Color, color_at.clone()))
            }
        }
    }
}

/// Every factual error of a caption, one per failed sentence.
pub fn judge_words(scene: &Scene, words: &[&str]) -> Vec<FactError> {
    let mut errors = Vec::new();
    for (sentence, &(start, end)) in segment_sentences(words).spans.iter().enumerate() {
        let all = || (start..end).collect::<Vec<_>>();
        let found = match parse_sentence(&words[start..end], start) {
            None => Some((ErrorKind::Unparseable, all())),
            Some(claim) => evaluate(scene, &claim),
        };
        if let Some((kind, mut tokens)) = found {
            if tokens.is_empty() {
                tokens = all();
            }
            errors.push(FactError { sentence, kind, tokens });
        }
    }
    errors
}

/// Errors of a VQA answer judged together with its question.
pub fn judge_answer_words(scene: &Scene, question: &[&str], answer: &[&str]) -> Vec<FactError> {
    let all = || (0..answer.len()).collect::<Vec<_>>();
    let claim = parse_question(question).and_then(|q| parse_answer(&q, answer));
    let found = match claim {
        None => Some((ErrorKind::Unparseable, all())),
        Some(claim) => evaluate(scene, &claim),
    };
    match found {
        None => Vec::new(),
        Some((kind, mut tokens)) => {
            if tokens.is_empty() {
                tokens = all();
            }
            vec![FactError { sentence: 0, kind, tokens }]
        }
    }
}

/// Per-token "good" indicators implied by a set of errors.
pub fn good_tokens(errors: &[FactError], len: usize) -> Vec<u8> {
    let mut good = vec![1u8; len];
    for e in errors {
        for &t in &e.tokens {
            if t < len {
                good[t] = 0;
            }
        }
    }
    good
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Category, Cell, Color, Material, OcrWord, SizeClass};

    fn scene() -> Scene {
        let o = |id, category, color, row, col| SceneObject {
            id,
            category,
            color,
            material: None,
            size: SizeClass::Normal,
            cell: Cell::new(row, col),
            text: None,
        };
        let mut sign = o(2, Category::Sign, Color::Blue, 4, 1);
        sign.text = Some(OcrWord::Stop);
        sign.size = SizeClass::Small;
        let mut table = o(1, Category::Table, Color::White, 2, 6);
        table.material = Some(Material::Wooden);
        Scene { id: 0, width: 8, height: 8, objects: vec![o(0, Category::Cat, Color::Red, 2, 1), table, sign], seed: 0 }
    }

    fn judge(text: &str) -> Vec<FactError> {
        let words: Vec<&str> = text.split_whitespace().collect();
        judge_words(&scene(), &words)
    }

    #[test]
    fn true_sentences_pass() {
        for s in [
            "a red cat is at row 2 column 1 .",
            "a white wooden table is at row 2 column 6 .",
            "a small blue sign is at row 4 column 1 .",
            "a cat is at row 2 column 1 .",
            "the cat is left of the table .",
            "the sign is below the cat .",
            "there is 1 cat .",
            "there are 0 ducks .",
            "there is no green cat .",
            "the sign says stop .",
            "the table is white .",
        ] {
            assert!(judge(s).is_empty(), "{s}: {:?}", judge(s));
        }
    }

    #[test]
    fn relations_need_two_distinct_objects() {
        assert_eq!(judge("the cat is next to the cat .")[0].kind, ErrorKind::Relation);
    }

    #[test]
    fn attributes_errors_to_the_false_words() {
        let e = judge("a green cat is at row 2 column 1 .");
        assert_eq!(e, vec![FactError { sentence: 0, kind: ErrorKind::Attribute, tokens: vec![1] }]);
        let e = judge("a small red cat is at row 2 column 1 .");
        assert_eq!(e[0].tokens, vec![1]);
        let e = judge("a red cat is at row 3 column 1 .");
        assert_eq!(e[0].kind, ErrorKind::Location);
        assert_eq!(e[0].tokens, vec![6, 8]);
        let e = judge("the cat is right of the table .");
        assert_eq!(e[0].tokens, vec![3, 4]);
        let e = judge("there is no red cat .");
        assert_eq!(e[0].tokens, vec![2]);
        let e = judge("the sign says open .");
        assert_eq!(e[0].tokens, vec![3]);
        let e = judge("the dog is left of the table .");
        assert_eq!((e[0].kind, e[0].tokens.clone()), (ErrorKind::Unresolved, vec![1]));
    }

    #[test]
    fn one_error_per_false_sentence() {
        let e = judge("a green cat is at row 2 column 1 . there are 4 cats . the sign says hello .");
        assert_eq!(e.iter().map(|e| e.sentence).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn unparseable_sentence_blames_every_token() {
        let e = judge("a red cat . the sign says stop .");
        assert_eq!(e, vec![FactError { sentence: 0, kind: ErrorKind::Unparseable, tokens: vec![0, 1, 2, 3] }]);
    }

    #[test]
    fn plural_placement_claims_are_false() {
        let e = judge("2 cats are at row 2 column 1 .");
        assert_eq!(e[0].kind, ErrorKind::Count);
        assert_eq!(e[0].tokens, vec![0]);
    }

    #[test]
    fn answers_are_judged_with_their_question() {
        let s = scene();
        fn q(t: &str) -> Vec<&str> {
            t.split_whitespace().collect()
        }
        assert!(judge_answer_words(&s, &q("what color is the cat ?"), &q("red")).is_empty());
        assert_eq!(judge_answer_words(&s, &q("what color is the cat ?"), &q("blue"))[0].tokens, vec![0]);
        assert!(judge_answer_words(&s, &q("what is at row 2 column 6 ?"), &q("a white wooden table")).is_empty());
        assert_eq!(judge_answer_words(&s, &q("what is at row 2 column 6 ?"), &q("a white wooden chair"))[0].tokens, vec![3]);
        assert!(judge_answer_words(&s, &q("how many cats are there ?"), &q("there is 1 cat")).is_empty());
        assert!(judge_answer_words(&s, &q("where is the cat relative to the table ?"), &q("left of the table")).is_empty());
        assert_eq!(
            judge_answer_words(&s, &q("where is the cat relative to the table ?"), &q("right of the table"))[0].tokens,
            vec![0, 1]
        );
        assert!(judge_answer_words(&s, &q("where is the sign ?"), &q("at row 4 column 1")).is_empty());
        assert!(judge_answer_words(&s, &q("what does the sign say ?"), &q("stop")).is_empty());
        assert_eq!(judge_answer_words(&s, &q("what does the sign say ?"), &q("exit"))[0].tokens, vec![0]);
        assert_eq!(judge_answer_words(&s, &q("what does the sign say ?"), &q("a cat"))[0].kind, ErrorKind::Unparseable);
    }

    #[test]
    fn good_token_mask() {
        let errors = vec![FactError { sentence: 0, kind: ErrorKind::Color, tokens: vec![1, 3] }];
        assert_eq!(good_tokens(&errors, 4), vec![1, 0, 1, 0]);
    }
}
