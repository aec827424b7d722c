//! Sentence templates of the caption and VQA grammar, and their parser.
//!
//! Every sentence the generators emit parses back into a [`Claim`] whose
//! token positions are kept, so that a failed claim can be attributed to the
//! exact words that make it false.

use crate::language::vocab::Vocab;
use crate::scene::{Category, Cell, Color, Material, OcrWord, Relation, Scene, SceneObject, SizeClass};

/// The word for a numeral. Panics above 100, which the vocabulary does not cover.
pub fn numeral(n: usize) -> &'static str {
    let vocab = Vocab::global();
    let id = vocab.id(&n.to_string()).unwrap_or_else(|| panic!("numeral {n} outside the vocabulary"));
    vocab.word(id)
}

pub fn parse_numeral(word: &str) -> Option<usize> {
    let n: usize = word.parse().ok()?;
    (n <= 100 && n.to_string() == word).then_some(n)
}

/// What a noun phrase says about its referent. Unset fields are unconstrained.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Descriptor {
    pub small: bool,
    pub color: Option<Color>,
    pub material: Option<Material>,
    pub category: Category,
    pub cell: Option<Cell>,
}

impl Descriptor {
    pub fn category(category: Category) -> Self {
        Self { small: false, color: None, material: None, category, cell: None }
    }

    /// Every attribute of the object, without its location.
    pub fn full(o: &SceneObject) -> Self {
        Self {
            small: o.size == SizeClass::Small,
            color: Some(o.color),
            material: o.material,
            category: o.category,
            cell: None,
        }
    }

    /// Bare category when it is unique in the scene, otherwise color and category.
    pub fn reference(scene: &Scene, o: &SceneObject) -> Self {
        let mut d = Self::category(o.category);
        if scene.count(o.category) > 1 {
            d.color = Some(o.color);
        }
        d
    }

    /// Bare category when unique, otherwise category qualified by its cell.
    pub fn located(scene: &Scene, o: &SceneObject) -> Self {
        let mut d = Self::category(o.category);
        if scene.count(o.category) > 1 {
            d.cell = Some(o.cell);
        }
        d
    }

    pub fn matches(&self, o: &SceneObject) -> bool {
        o.category == self.category
            && (!self.small || o.size == SizeClass::Small)
            && self.color.is_none_or(|c| c == o.color)
            && self.material.is_none_or(|m| o.material == Some(m))
            && self.cell.is_none_or(|c| c == o.cell)
    }

    pub fn words(&self, plural: bool) -> Vec<&'static str> {
        let mut w = Vec::new();
        if self.small {
            w.push("small");
        }
        if let Some(c) = self.color {
            w.push(c.word());
        }
        if let Some(m) = self.material {
            w.push(m.word());
        }
        w.push(if plural { self.category.plural() } else { self.category.word() });
        if let Some(cell) = self.cell {
            w.extend(["at", "row", numeral(cell.row), "column", numeral(cell.col)]);
        }
        w
    }
}

/// A parsed noun phrase with the absolute positions of its words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NounPhrase {
    pub desc: Descriptor,
    pub plural: bool,
    pub at: Vec<usize>,
    pub small_at: Option<usize>,
    pub color_at: Option<usize>,
    pub material_at: Option<usize>,
    pub category_at: usize,
    pub cell_at: Vec<usize>,
}

impl NounPhrase {
    /// Positions of the words contradicted by `o`.
    pub fn mismatches(&self, o: &SceneObject) -> Vec<usize> {
        let mut out = Vec::new();
        if self.desc.small && o.size != SizeClass::Small {
            out.extend(self.small_at);
        }
        if self.desc.color.is_some_and(|c| c != o.color) {
            out.extend(self.color_at);
        }
        if self.desc.material.is_some_and(|m| o.material != Some(m)) {
            out.extend(self.material_at);
        }
        if self.desc.category != o.category {
            out.push(self.category_at);
        }
        if self.desc.cell.is_some_and(|c| c != o.cell) {
            out.extend(&self.cell_at);
        }
        out
    }

    /// Forget positions; used for phrases that live in a question rather than the response.
    fn detached(mut self) -> Self {
        self.at.clear();
        self.small_at = None;
        self.color_at = None;
        self.material_at = None;
        self.cell_at.clear();
        self
    }
}

/// An atomic, checkable assertion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Claim {
    /// `count` objects matching `np` occupy `cell`.
    ObjectAt { np: NounPhrase, count: usize, count_at: Vec<usize>, cell: Cell, cell_at: Vec<usize> },
    /// Some object matching `a` stands in `relation` to some object matching `b`.
    Relation { a: NounPhrase, relation: Relation, relation_at: Vec<usize>, b: NounPhrase },
    Count { category: Category, n: usize, n_at: Vec<usize> },
    Absent { np: NounPhrase, no_at: Vec<usize> },
    Says { np: NounPhrase, word: OcrWord, word_at: Vec<usize> },
    HasColor { np: NounPhrase, color: Color, color_at: Vec<usize> },
}

pub fn object_sentence(o: &SceneObject) -> Vec<&'static str> {
    let mut w = vec!["a"];
    w.extend(Descriptor::full(o).words(false));
    w.extend(["is", "at", "row", numeral(o.cell.row), "column", numeral(o.cell.col), "."]);
    w
}

pub fn relation_sentence(a: &Descriptor, relation: Relation, b: &Descriptor) -> Vec<&'static str> {
    let mut w = vec!["the"];
    w.extend(a.words(false));
    w.push("is");
    w.extend(relation.words());
    w.push("the");
    w.extend(b.words(false));
    w.push(".");
    w
}

/// `there is 1 cat` or `there are 3 cats`, without the period.
pub fn count_phrase(category: Category, n: usize) -> Vec<&'static str> {
    if n == 1 {
        vec!["there", "is", "1", category.word()]
    } else {
        vec!["there", "are", numeral(n), category.plural()]
    }
}

pub fn count_sentence(category: Category, n: usize) -> Vec<&'static str> {
    let mut w = count_phrase(category, n);
    w.push(".");
    w
}

pub fn says_sentence(np: &Descriptor, word: OcrWord) -> Vec<&'static str> {
    let mut w = vec!["the"];
    w.extend(np.words(false));
    w.extend(["says", word.word(), "."]);
    w
}

pub fn absent_sentence(np: &Descriptor) -> Vec<&'static str> {
    let mut w = vec!["there", "is", "no"];
    w.extend(np.words(false));
    w.push(".");
    w
}

pub fn color_sentence(np: &Descriptor, color: Color) -> Vec<&'static str> {
    let mut w = vec!["the"];
    w.extend(np.words(false));
    w.extend(["is", color.word(), "."]);
    w
}

/// Placement sentence for a descriptor: `a red mug is at row 1 column 1 .`
pub fn placement_sentence(np: &Descriptor, cell: Cell) -> Vec<&'static str> {
    let mut d = np.clone();
    d.cell = None;
    let mut w = vec!["a"];
    w.extend(d.words(false));
    w.extend(["is", "at", "row", numeral(cell.row), "column", numeral(cell.col), "."]);
    w
}

struct Cursor<'a> {
    words: &'a [&'a str],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn new(words: &'a [&'a str], base: usize) -> Self {
        Self { words, pos: 0, base }
    }

    fn peek(&self) -> Option<&'a str> {
        self.words.get(self.pos).copied()
    }

    fn peek_at(&self, ahead: usize) -> Option<&'a str> {
        self.words.get(self.pos + ahead).copied()
    }

    fn abs(&self) -> usize {
        self.base + self.pos
    }

    fn bump(&mut self) -> Option<(usize, &'a str)> {
        let w = self.peek()?;
        let at = self.abs();
        self.pos += 1;
        Some((at, w))
    }

    fn eat(&mut self, word: &str) -> Option<usize> {
        (self.peek() == Some(word)).then(|| self.bump().map(|(at, _)| at))?
    }

    fn eat_seq(&mut self, seq: &[&str]) -> Option<Vec<usize>> {
        seq.iter().map(|w| self.eat(w)).collect()
    }

    fn numeral(&mut self) -> Option<(usize, usize)> {
        let n = parse_numeral(self.peek()?)?;
        let (at, _) = self.bump()?;
        Some((at, n))
    }

    fn done(&self) -> bool {
        self.pos == self.words.len()
    }

    /// `at row R column C`
    fn location(&mut self) -> Option<(Cell, Vec<usize>)> {
        self.eat("at")?;
        self.eat("row")?;
        let (r_at, row) = self.numeral()?;
        self.eat("column")?;
        let (c_at, col) = self.numeral()?;
        Some((Cell::new(row, col), vec![r_at, c_at]))
    }

    fn relation(&mut self) -> Option<(Relation, Vec<usize>)> {
        for relation in Relation::ALL {
            let words = relation.words();
            if words.iter().enumerate().all(|(i, w)| self.peek_at(i) == Some(*w)) {
                return Some((relation, self.eat_seq(words)?));
            }
        }
        None
    }

    /// `[small] [color] [material] category [at row R column C]`
    fn noun_phrase(&mut self, allow_location: bool) -> Option<NounPhrase> {
        let start = self.pos;
        let small_at = self.eat("small");
        let mut color = None;
        let mut color_at = None;
        if let Some(c) = self.peek().and_then(Color::from_word) {
            color = Some(c);
            color_at = self.bump().map(|(at, _)| at);
        }
        let mut material = None;
        let mut material_at = None;
        if let Some(m) = self.peek().and_then(Material::from_word) {
            material = Some(m);
            material_at = self.bump().map(|(at, _)| at);
        }
        let word = self.peek()?;
        let (category, plural) = match Category::from_word(word) {
            Some(c) => (c, false),
            None => (Category::from_plural(word)?, true),
        };
        let (category_at, _) = self.bump()?;
        let mut cell = None;
        let mut cell_at = Vec::new();
        if allow_location && self.peek() == Some("at") && self.peek_at(1) == Some("row") {
            let (c, at) = self.location()?;
            cell = Some(c);
            cell_at = at;
        }
        let desc = Descriptor { small: small_at.is_some(), color, material, category, cell };
        let at = (self.base + start..self.abs()).collect();
        Some(NounPhrase { desc, plural, at, small_at, color_at, material_at, category_at, cell_at })
    }
}

/// Parse one sentence (including its final period) into a claim. `base` is the
/// absolute position of the sentence's first word.
pub fn parse_sentence(words: &[&str], base: usize) -> Option<Claim> {
    let mut cur = Cursor::new(words, base);
    let claim = match cur.peek()? {
        "there" => parse_there(&mut cur)?,
        "the" => parse_the(&mut cur)?,
        _ => parse_placement(&mut cur)?,
    };
    cur.eat(".")?;
    cur.done().then_some(claim)
}

fn parse_there(cur: &mut Cursor) -> Option<Claim> {
    cur.eat("there")?;
    let plural_verb = match cur.bump()?.1 {
        "is" => false,
        "are" => true,
        _ => return None,
    };
    if let Some(no) = cur.eat("no") {
        let np = cur.noun_phrase(false)?;
        return (np.plural == plural_verb).then_some(Claim::Absent { np, no_at: vec![no] });
    }
    let (n_at, n) = cur.numeral()?;
    let (_, noun) = cur.bump()?;
    let category = if n == 1 {
        (!plural_verb).then_some(())?;
        Category::from_word(noun)?
    } else {
        plural_verb.then_some(())?;
        Category::from_plural(noun)?
    };
    Some(Claim::Count { category, n, n_at: vec![n_at] })
}

fn parse_the(cur: &mut Cursor) -> Option<Claim> {
    cur.eat("the")?;
    let a = cur.noun_phrase(true)?;
    if a.plural {
        return None;
    }
    if cur.eat("says").is_some() {
        let (word_at, w) = cur.bump()?;
        return Some(Claim::Says { np: a, word: OcrWord::from_word(w)?, word_at: vec![word_at] });
    }
    cur.eat("is")?;
    if let Some(color) = cur.peek().and_then(Color::from_word) {
        let (color_at, _) = cur.bump()?;
        return Some(Claim::HasColor { np: a, color, color_at: vec![color_at] });
    }
    let (relation, relation_at) = cur.relation()?;
    cur.eat("the")?;
    let b = cur.noun_phrase(true)?;
    (!b.plural).then_some(Claim::Relation { a, relation, relation_at, b })
}

/// `a|one|N NP is|are at row R column C`
fn parse_placement(cur: &mut Cursor) -> Option<Claim> {
    let (det_at, det) = cur.bump()?;
    let count = match det {
        "a" | "one" => 1,
        w => parse_numeral(w)?,
    };
    let np = cur.noun_phrase(false)?;
    let (_, verb) = cur.bump()?;
    let agrees = if count == 1 { !np.plural && verb == "is" } else { np.plural && verb == "are" };
    if !agrees {
        return None;
    }
    let (cell, cell_at) = cur.location()?;
    Some(Claim::ObjectAt { np, count, count_at: vec![det_at], cell, cell_at })
}

/// The kinds of question the VQA grammar asks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Question {
    Color { np: NounPhrase },
    WhatIsAt { cell: Cell },
    HowMany { category: Category },
    Relative { a: NounPhrase, b: NounPhrase },
    Where { np: NounPhrase },
    Say { np: NounPhrase },
}

pub fn color_question(np: &Descriptor) -> Vec<&'static str> {
    let mut w = vec!["what", "color", "is", "the"];
    w.extend(np.words(false));
    w.push("?");
    w
}

pub fn what_is_at_question(cell: Cell) -> Vec<&'static str> {
    vec!["what", "is", "at", "row", numeral(cell.row), "column", numeral(cell.col), "?"]
}

pub fn how_many_question(category: Category) -> Vec<&'static str> {
    vec!["how", "many", category.plural(), "are", "there", "?"]
}

pub fn relative_question(a: &Descriptor, b: &Descriptor) -> Vec<&'static str> {
    let mut w = vec!["where", "is", "the"];
    w.extend(a.words(false));
    w.extend(["relative", "to", "the"]);
    w.extend(b.words(false));
    w.push("?");
    w
}

pub fn where_question(np: &Descriptor) -> Vec<&'static str> {
    let mut w = vec!["where", "is", "the"];
    w.extend(np.words(false));
    w.push("?");
    w
}

pub fn say_question(np: &Descriptor) -> Vec<&'static str> {
    let mut w = vec!["what", "does", "the"];
    w.extend(np.words(false));
    w.extend(["say", "?"]);
    w
}

pub fn parse_question(words: &[&str]) -> Option<Question> {
    let mut cur = Cursor::new(words, 0);
    let q = match (cur.peek()?, cur.peek_at(1)?) {
        ("what", "color") => {
            cur.eat_seq(&["what", "color", "is", "the"])?;
            Question::Color { np: cur.noun_phrase(true)? }
        }
        ("what", "is") => {
            cur.eat_seq(&["what", "is"])?;
            let (cell, _) = cur.location()?;
            Question::WhatIsAt { cell }
        }
        ("what", "does") => {
            cur.eat_seq(&["what", "does", "the"])?;
            let np = cur.noun_phrase(true)?;
            cur.eat("say")?;
            Question::Say { np }
        }
        ("how", "many") => {
            cur.eat_seq(&["how", "many"])?;
            let category = Category::from_plural(cur.bump()?.1)?;
            cur.eat_seq(&["are", "there"])?;
            Question::HowMany { category }
        }
        ("where", "is") => {
            cur.eat_seq(&["where", "is", "the"])?;
            let a = cur.noun_phrase(true)?;
            if cur.eat("relative").is_some() {
                cur.eat_seq(&["to", "the"])?;
                let b = cur.noun_phrase(true)?;
                Question::Relative { a, b }
            } else {
                Question::Where { np: a }
            }
        }
        _ => return None,
    };
    cur.eat("?")?;
    cur.done().then_some(q)
}

/// Parse an answer in the context of its question. Positions are relative to the answer.
pub fn parse_answer(question: &Question, words: &[&str]) -> Option<Claim> {
    let mut cur = Cursor::new(words, 0);
    let claim = match question {
        Question::Color { np } => {
            let color = Color::from_word(cur.peek()?)?;
            let (at, _) = cur.bump()?;
            Claim::HasColor { np: np.clone().detached(), color, color_at: vec![at] }
        }
        Question::WhatIsAt { cell } => {
            let (det_at, det) = cur.bump()?;
            if det != "a" && det != "one" {
                return None;
            }
            let np = cur.noun_phrase(false)?;
            if np.plural {
                return None;
            }
            Claim::ObjectAt { np, count: 1, count_at: vec![det_at], cell: *cell, cell_at: Vec::new() }
        }
        Question::HowMany { category } => match parse_there(&mut cur)? {
            Claim::Count { category: c, n, n_at } if c == *category => Claim::Count { category: c, n, n_at },
            _ => return None,
        },
        Question::Relative { a, .. } => {
            let (relation, relation_at) = cur.relation()?;
            cur.eat("the")?;
            let b = cur.noun_phrase(true)?;
            Claim::Relation { a: a.clone().detached(), relation, relation_at, b }
        }
        Question::Where { np } => {
            let (cell, cell_at) = cur.location()?;
            let np = np.clone().detached();
            Claim::ObjectAt { np, count: 1, count_at: Vec::new(), cell, cell_at }
        }
        Question::Say { np } => {
            let word = OcrWord::from_word(cur.peek()?)?;
            let (at, _) = cur.bump()?;
            Claim::Says { np: np.clone().detached(), word, word_at: vec![at] }
        }
    };
    cur.done().then_some(claim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mug() -> SceneObject {
        SceneObject {
            id: 0,
            category: Category::Mug,
            color: Color::Red,
            material: None,
            size: SizeClass::Normal,
            cell: Cell::new(1, 1),
            text: None,
        }
    }

    #[test]
    fn object_sentence_template() {
        assert_eq!(object_sentence(&mug()).join(" "), "a red mug is at row 1 column 1 .");
    }

    #[test]
    fn object_sentence_parses_with_positions() {
        let words = object_sentence(&mug());
        let Some(Claim::ObjectAt { np, count, cell, cell_at, .. }) = parse_sentence(&words, 10) else {
            panic!("no placement claim");
        };
        assert_eq!(count, 1);
        assert_eq!(cell, Cell::new(1, 1));
        assert_eq!(np.color_at, Some(11));
        assert_eq!(np.category_at, 12);
        assert_eq!(cell_at, vec![16, 18]);
    }

    #[test]
    fn determiner_numbers_must_agree() {
        let ok = ["4", "ducks", "are", "at", "row", "2", "column", "3", "."];
        assert!(matches!(parse_sentence(&ok, 0), Some(Claim::ObjectAt { count: 4, .. })));
        let bad = ["4", "duck", "is", "at", "row", "2", "column", "3", "."];
        assert_eq!(parse_sentence(&bad, 0), None);
        let one = ["one", "duck", "is", "at", "row", "2", "column", "3", "."];
        assert!(matches!(parse_sentence(&one, 0), Some(Claim::ObjectAt { count: 1, .. })));
    }

    #[test]
    fn parses_each_sentence_form() {
        let cases: &[&[&str]] = &[
            &["the", "cat", "is", "left", "of", "the", "table", "."],
            &["there", "are", "3", "apples", "."],
            &["there", "is", "1", "apple", "."],
            &["there", "is", "no", "red", "mug", "."],
            &["the", "sign", "says", "stop", "."],
            &["the", "mug", "is", "red", "."],
        ];
        for words in cases {
            assert!(parse_sentence(words, 0).is_some(), "{words:?}");
        }
    }

    #[test]
    fn rejects_malformed_sentences() {
        let cases: &[&[&str]] = &[
            &["the", "cat", "is", "left", "of", "the", "table"],
            &["there", "is", "3", "apples", "."],
            &["there", "are", "1", "apple", "."],
            &["cat", "is", "at", "row", "1", "column", "1", "."],
            &["the", "cat", "is", "left", "the", "table", "."],
            &[],
        ];
        for words in cases {
            assert!(parse_sentence(words, 0).is_none(), "{words:?}");
        }
    }

    #[test]
    fn numerals_are_canonical() {
        assert_eq!(parse_numeral("07"), None);
        assert_eq!(parse_numeral("100"), Some(100));
        assert_eq!(parse_numeral("101"), None);
    }

    #[test]
    fn questions_round_trip_through_the_parser() {
        let d = Descriptor { cell: Some(Cell::new(1, 2)), ..Descriptor::category(Category::Mug) };
        let qs = [
            color_question(&d),
            what_is_at_question(Cell::new(3, 4)),
            how_many_question(Category::Apple),
            relative_question(&Descriptor::category(Category::Cat), &d),
            where_question(&Descriptor::category(Category::Cat)),
            say_question(&d),
        ];
        for q in qs {
            assert!(parse_question(&q).is_some(), "{q:?}");
        }
    }
}
