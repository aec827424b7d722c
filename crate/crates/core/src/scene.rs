//! The symbolic scene world.
//!
//! A [`Scene`] is a small grid of attributed objects. It plays the role of the
//! image: every caption fact is decidable against it from coordinates and
//! attributes alone. Scenes serialize to a dedicated image-token vocabulary
//! that is disjoint from the text vocabulary.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Largest supported grid side.
pub const MAX_GRID: usize = 10;
/// Largest object count representable in the image header.
pub const MAX_OBJECTS: usize = MAX_GRID * MAX_GRID;

macro_rules! closed_vocab {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_word(word: &str) -> Option<Self> {
                match word { $($word => Some($name::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::from_word(s).ok_or_else(|| Error::Vocabulary(s.to_string()))
            }
        }
    };
}

closed_vocab!(Category {
    Cat => "cat", Dog => "dog", Duck => "duck", Apple => "apple", Mug => "mug",
    Book => "book", Chair => "chair", Table => "table", Ball => "ball", Sign => "sign",
});

closed_vocab!(Color {
    Red => "red", Green => "green", Blue => "blue", Yellow => "yellow",
    Black => "black", White => "white", Orange => "orange",
});

closed_vocab!(Material {
    Wooden => "wooden", Metal => "metal", Plastic => "plastic", Glass => "glass", Woolen => "woolen",
});

closed_vocab!(SizeClass { Normal => "normal", Small => "small" });

closed_vocab!(
    /// Words that may be written on a sign, mug or book.
    OcrWord { Stop => "stop", Open => "open", Hello => "hello", Exit => "exit", Sale => "sale", Cafe => "cafe" }
);

impl Category {
    pub fn plural(self) -> &'static str {
        match self {
            Category::Cat => "cats",
            Category::Dog => "dogs",
            Category::Duck => "ducks",
            Category::Apple => "apples",
            Category::Mug => "mugs",
            Category::Book => "books",
            Category::Chair => "chairs",
            Category::Table => "tables",
            Category::Ball => "balls",
            Category::Sign => "signs",
        }
    }

    pub fn from_plural(word: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.plural() == word)
    }

    /// Only these categories may carry written text.
    pub fn allows_text(self) -> bool {
        matches!(self, Category::Sign | Category::Mug | Category::Book)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn chebyshev(self, other: Cell) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub category: Category,
    pub color: Color,
    pub material: Option<Material>,
    pub size: SizeClass,
    pub cell: Cell,
    pub text: Option<OcrWord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

/// World generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub categories: Vec<Category>,
    pub colors: Vec<Color>,
    pub materials: Vec<Material>,
    pub ocr_words: Vec<OcrWord>,
    pub material_prob: f64,
    pub small_prob: f64,
    pub text_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            min_objects: 1,
            max_objects: 4,
            categories: Category::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            materials: Material::ALL.to_vec(),
            ocr_words: OcrWord::ALL.to_vec(),
            material_prob: 0.4,
            small_prob: 0.25,
            text_prob: 0.6,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width > MAX_GRID || self.height > MAX_GRID {
            return Err(Error::Config(format!(
                "grid must be between 1x1 and {MAX_GRID}x{MAX_GRID}, got {}x{}",
                self.width, self.height
            )));
        }
        let cells = self.width * self.height;
        if self.max_objects > cells {
            return Err(Error::Capacity { requested: self.max_objects, cells });
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range {}..={} is empty or starts at zero",
                self.min_objects, self.max_objects
            )));
        }
        if self.categories.is_empty() || self.colors.is_empty() {
            return Err(Error::Config("category and color vocabularies must be non-empty".into()));
        }
        if self.material_prob > 0.0 && self.materials.is_empty() {
            return Err(Error::Config("material vocabulary is empty but material_prob > 0".into()));
        }
        if self.text_prob > 0.0 && self.ocr_words.is_empty() {
            return Err(Error::Config("ocr vocabulary is empty but text_prob > 0".into()));
        }
        for p in [self.material_prob, self.small_prob, self.text_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Generate a scene. Deterministic in `(config, seed)`; the scene id defaults to the seed.
pub fn generate_scene(config: &WorldConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let cells = config.width * config.height;
    let mut picked: Vec<Cell> = index::sample(&mut rng, cells, count)
        .into_iter()
        .map(|i| Cell::new(i / config.width, i % config.width))
        .collect();
    picked.sort();

    let mut objects = Vec::with_capacity(count);
    for (id, cell) in picked.into_iter().enumerate() {
        let category = config.categories[rng.random_range(0..config.categories.len())];
        let color = config.colors[rng.random_range(0..config.colors.len())];
        let material = if rng.random_bool(config.material_prob) {
            Some(config.materials[rng.random_range(0..config.materials.len())])
        } else {
            None
        };
        let size = if rng.random_bool(config.small_prob) { SizeClass::Small } else { SizeClass::Normal };
        let text = if category.allows_text() && rng.random_bool(config.text_prob) {
            Some(config.ocr_words[rng.random_range(0..config.ocr_words.len())])
        } else {
            None
        };
        objects.push(SceneObject { id: id as u32, category, color, material, size, cell, text });
    }

    Ok(Scene { id: seed, width: config.width, height: config.height, objects, seed })
}

impl Scene {
    pub fn object_at(&self, cell: Cell) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn count(&self, category: Category) -> usize {
        self.objects.iter().filter(|o| o.category == category).count()
    }

    /// Check every structural invariant; returns a description of the first violation.
    pub fn audit(&self) -> std::result::Result<(), String> {
        let mut seen_cells = BTreeSet::new();
        let mut seen_ids = BTreeSet::new();
        for o in &self.objects {
            if o.cell.row >= self.height || o.cell.col >= self.width {
                return Err(format!("object {} at {:?} is outside the grid", o.id, o.cell));
            }
            if !seen_cells.insert(o.cell) {
                return Err(format!("cell {:?} holds two objects", o.cell));
            }
            if !seen_ids.insert(o.id) {
                return Err(format!("duplicate object id {}", o.id));
            }
            if o.text.is_some() && !o.category.allows_text() {
                return Err(format!("object {} ({}) carries text", o.id, o.category));
            }
        }
        if !self.objects.windows(2).all(|w| w[0].cell < w[1].cell) {
            return Err("objects are not sorted by (row, column)".into());
        }
        Ok(())
    }
}

/// Count objects of the named category.
pub fn count_category(scene: &Scene, category: &str) -> Result<usize> {
    let category: Category = category.parse()?;
    Ok(scene.count(category))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
    NextTo,
}

impl Relation {
    pub const ALL: [Relation; 5] =
        [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below, Relation::NextTo];

    /// Surface words, e.g. `["left", "of"]`.
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
            Relation::NextTo => &["next", "to"],
        }
    }

    pub fn dual(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::NextTo => Relation::NextTo,
        }
    }

    pub fn holds(self, a: Cell, b: Cell) -> bool {
        match self {
            Relation::LeftOf => a.row == b.row && a.col < b.col,
            Relation::RightOf => a.row == b.row && a.col > b.col,
            Relation::Above => a.col == b.col && a.row < b.row,
            Relation::Below => a.col == b.col && a.row > b.row,
            Relation::NextTo => a.chebyshev(b) == 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpatialFact {
    pub relation: Relation,
    pub subject: u32,
    pub object: u32,
}

/// Every spatial fact that holds between distinct objects of the scene.
pub fn derive_relations(scene: &Scene) -> BTreeSet<SpatialFact> {
    let mut facts = BTreeSet::new();
    for a in &scene.objects {
        for b in &scene.objects {
            if a.id == b.id {
                continue;
            }
            for relation in Relation::ALL {
                if relation.holds(a.cell, b.cell) {
                    facts.insert(SpatialFact { relation, subject: a.id, object: b.id });
                }
            }
        }
    }
    facts
}

/// Tokens of the image vocabulary. Disjoint from the text vocabulary: image
/// tokens are embedded by their own table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImageToken {
    Obj,
    Txt,
    MaterialNone,
    Width(usize),
    Height(usize),
    Count(usize),
    Category(Category),
    Color(Color),
    Material(Material),
    Size(SizeClass),
    Row(usize),
    Col(usize),
    Word(OcrWord),
}

const OFF_WIDTH: usize = 3;
const OFF_HEIGHT: usize = OFF_WIDTH + MAX_GRID;
const OFF_COUNT: usize = OFF_HEIGHT + MAX_GRID;
const OFF_CATEGORY: usize = OFF_COUNT + MAX_OBJECTS + 1;
const OFF_COLOR: usize = OFF_CATEGORY + 10;
const OFF_MATERIAL: usize = OFF_COLOR + 7;
const OFF_SIZE: usize = OFF_MATERIAL + 5;
const OFF_ROW: usize = OFF_SIZE + 2;
const OFF_COL: usize = OFF_ROW + MAX_GRID;
const OFF_WORD: usize = OFF_COL + MAX_GRID;

/// Size of the image-token vocabulary.
pub const IMAGE_VOCAB_SIZE: usize = OFF_WORD + 6;

impl ImageToken {
    pub fn id(self) -> u32 {
        let id = match self {
            ImageToken::Obj => 0,
            ImageToken::Txt => 1,
            ImageToken::MaterialNone => 2,
            ImageToken::Width(w) => OFF_WIDTH + w - 1,
            ImageToken::Height(h) => OFF_HEIGHT + h - 1,
            ImageToken::Count(n) => OFF_COUNT + n,
            ImageToken::Category(c) => OFF_CATEGORY + c.index(),
            ImageToken::Color(c) => OFF_COLOR + c.index(),
            ImageToken::Material(m) => OFF_MATERIAL + m.index(),
            ImageToken::Size(s) => OFF_SIZE + s.index(),
            ImageToken::Row(r) => OFF_ROW + r,
            ImageToken::Col(c) => OFF_COL + c,
            ImageToken::Word(w) => OFF_WORD + w.index(),
        };
        id as u32
    }

    pub fn from_id(id: u32) -> Option<ImageToken> {
        let id = id as usize;
        let tok = match id {
            0 => ImageToken::Obj,
            1 => ImageToken::Txt,
            2 => ImageToken::MaterialNone,
            _ if id < OFF_HEIGHT => ImageToken::Width(id - OFF_WIDTH + 1),
            _ if id < OFF_COUNT => ImageToken::Height(id - OFF_HEIGHT + 1),
            _ if id < OFF_CATEGORY => ImageToken::Count(id - OFF_COUNT),
            _ if id < OFF_COLOR => ImageToken::Category(Category::ALL[id - OFF_CATEGORY]),
            _ if id < OFF_MATERIAL => ImageToken::Color(Color::ALL[id - OFF_COLOR]),
            _ if id < OFF_SIZE => ImageToken::Material(Material::ALL[id - OFF_MATERIAL]),
            _ if id < OFF_ROW => ImageToken::Size(SizeClass::ALL[id - OFF_SIZE]),
            _ if id < OFF_COL => ImageToken::Row(id - OFF_ROW),
            _ if id < OFF_WORD => ImageToken::Col(id - OFF_COL),
            _ if id < IMAGE_VOCAB_SIZE => ImageToken::Word(OcrWord::ALL[id - OFF_WORD]),
            _ => return None,
        };
        Some(tok)
    }

    pub fn name(self) -> String {
        match self {
            ImageToken::Obj => "OBJ".into(),
            ImageToken::Txt => "TXT".into(),
            ImageToken::MaterialNone => "MAT_NONE".into(),
            ImageToken::Width(w) => format!("W_{w}"),
            ImageToken::Height(h) => format!("H_{h}"),
            ImageToken::Count(n) => format!("N_{n}"),
            ImageToken::Category(c) => format!("CAT_{}", c.word().to_uppercase()),
            ImageToken::Color(c) => format!("COLOR_{}", c.word().to_uppercase()),
            ImageToken::Material(m) => format!("MAT_{}", m.word().to_uppercase()),
            ImageToken::Size(s) => format!("SIZE_{}", s.word().to_uppercase()),
            ImageToken::Row(r) => format!("ROW_{r}"),
            ImageToken::Col(c) => format!("COL_{c}"),
            ImageToken::Word(w) => format!("TXT_{}", w.word().to_uppercase()),
        }
    }
}

/// Serialize a scene into image tokens: a 3-token header, then one fixed-arity
/// tuple per object in (row, column) order.
pub fn serialize_scene(scene: &Scene) -> Vec<u32> {
    let mut out = vec![
        ImageToken::Width(scene.width).id(),
        ImageToken::Height(scene.height).id(),
        ImageToken::Count(scene.objects.len()).id(),
    ];
    for o in &scene.objects {
        out.push(ImageToken::Obj.id());
        out.push(ImageToken::Category(o.category).id());
        out.push(ImageToken::Color(o.color).id());
        out.push(match o.material {
            Some(m) => ImageToken::Material(m).id(),
            None => ImageToken::MaterialNone.id(),
        });
        out.push(ImageToken::Size(o.size).id());
        out.push(ImageToken::Row(o.cell.row).id());
        out.push(ImageToken::Col(o.cell.col).id());
        if let Some(w) = o.text {
            out.push(ImageToken::Txt.id());
            out.push(ImageToken::Word(w).id());
        }
    }
    out
}

/// Inverse of [`serialize_scene`]. Object ids are reassigned in token order,
/// which matches generation order.
pub fn deserialize_scene(tokens: &[u32], id: u64, seed: u64) -> Result<Scene> {
    let toks = tokens
        .iter()
        .map(|&t| ImageToken::from_id(t).ok_or_else(|| Error::ImageTokens(format!("unknown image token id {t}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut pos = 0;
    let next = |pos: &mut usize, what: &str| -> Result<ImageToken> {
        let t = toks.get(*pos).copied().ok_or_else(|| Error::ImageTokens(format!("truncated before {what}")))?;
        *pos += 1;
        Ok(t)
    };
    let bad = |what: &str, tok: ImageToken| Error::ImageTokens(format!("expected {what}, found {}", tok.name()));

    let width = match next(&mut pos, "width")? {
        ImageToken::Width(w) => w,
        t => return Err(bad("width", t)),
    };
    let height = match next(&mut pos, "height")? {
        ImageToken::Height(h) => h,
        t => return Err(bad("height", t)),
    };
    let count = match next(&mut pos, "count")? {
        ImageToken::Count(n) => n,
        t => return Err(bad("count", t)),
    };

    let mut objects = Vec::with_capacity(count);
    for i in 0..count {
        match next(&mut pos, "object")? {
            ImageToken::Obj => {}
            t => return Err(bad("OBJ", t)),
        }
        let category = match next(&mut pos, "category")? {
            ImageToken::Category(c) => c,
            t => return Err(bad("category", t)),
        };
        let color = match next(&mut pos, "color")? {
            ImageToken::Color(c) => c,
            t => return Err(bad("color", t)),
        };
        let material = match next(&mut pos, "material")? {
            ImageToken::Material(m) => Some(m),
            ImageToken::MaterialNone => None,
            t => return Err(bad("material", t)),
        };
        let size = match next(&mut pos, "size")? {
            ImageToken::Size(s) => s,
            t => return Err(bad("size", t)),
        };
        let row = match next(&mut pos, "row")? {
            ImageToken::Row(r) => r,
            t => return Err(bad("row", t)),
        };
        let col = match next(&mut pos, "column")? {
            ImageToken::Col(c) => c,
            t => return Err(bad("column", t)),
        };
        let text = if toks.get(pos) == Some(&ImageToken::Txt) {
            pos += 1;
            match next(&mut pos, "text word")? {
                ImageToken::Word(w) => Some(w),
                t => return Err(bad("text word", t)),
            }
        } else {
            None
        };
        objects.push(SceneObject { id: i as u32, category, color, material, size, cell: Cell::new(row, col), text });
    }
    if let Some(t) = toks.get(pos) {
        return Err(Error::ImageTokens(format!("trailing token {}", t.name())));
    }
    let scene = Scene { id, width, height, objects, seed };
    scene.audit().map_err(Error::ImageTokens)?;
    Ok(scene)
}

/// Header line of scene record files.
pub const SCENE_FILE_FORMAT: &str = "tldr-scenes";
pub const SCENE_FILE_VERSION: u32 = 1;

pub fn write_scenes<W: Write>(mut out: W, scenes: &[Scene]) -> Result<()> {
    crate::records::write_header(&mut out, SCENE_FILE_FORMAT, SCENE_FILE_VERSION)?;
    for s in scenes {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scenes<R: BufRead>(input: R) -> Result<Vec<Scene>> {
    crate::records::read_records(input, SCENE_FILE_FORMAT, SCENE_FILE_VERSION, "scene file")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(id: u32, category: Category, color: Color, row: usize, col: usize) -> SceneObject {
        SceneObject {
            id,
            category,
            color,
            material: None,
            size: SizeClass::Normal,
            cell: Cell::new(row, col),
            text: None,
        }
    }

    fn scene(objects: Vec<SceneObject>) -> Scene {
        Scene { id: 0, width: 8, height: 8, objects, seed: 0 }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default();
        assert_eq!(generate_scene(&cfg, 0).unwrap(), generate_scene(&cfg, 0).unwrap());
    }

    #[test]
    fn max_objects_one_forces_a_single_object() {
        let cfg = WorldConfig { max_objects: 1, ..WorldConfig::default() };
        assert_eq!(generate_scene(&cfg, 7).unwrap().objects.len(), 1);
    }

    #[test]
    fn capacity_error_when_objects_exceed_cells() {
        let cfg = WorldConfig { width: 2, height: 2, min_objects: 1, max_objects: 5, ..WorldConfig::default() };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Capacity { requested: 5, cells: 4 })));
    }

    #[test]
    fn empty_vocabulary_is_rejected() {
        let cfg = WorldConfig { colors: vec![], ..WorldConfig::default() };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn thousand_scenes_pass_audit() {
        let cfg = WorldConfig::default();
        for seed in 0..1000 {
            let s = generate_scene(&cfg, seed).unwrap();
            s.audit().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            assert!((cfg.min_objects..=cfg.max_objects).contains(&s.objects.len()));
        }
    }

    #[test]
    fn same_row_relations() {
        let s = scene(vec![obj(0, Category::Cat, Color::Red, 2, 1), obj(1, Category::Dog, Color::Red, 2, 5)]);
        let facts: Vec<_> = derive_relations(&s).into_iter().collect();
        assert_eq!(
            facts,
            vec![
                SpatialFact { relation: Relation::LeftOf, subject: 0, object: 1 },
                SpatialFact { relation: Relation::RightOf, subject: 1, object: 0 },
            ]
        );
    }

    #[test]
    fn same_column_relations() {
        let s = scene(vec![obj(0, Category::Cat, Color::Red, 1, 3), obj(1, Category::Dog, Color::Red, 4, 3)]);
        let facts: Vec<_> = derive_relations(&s).into_iter().collect();
        assert_eq!(
            facts,
            vec![
                SpatialFact { relation: Relation::Above, subject: 0, object: 1 },
                SpatialFact { relation: Relation::Below, subject: 1, object: 0 },
            ]
        );
    }

    #[test]
    fn diagonal_neighbours_are_only_next_to() {
        let s = scene(vec![obj(0, Category::Cat, Color::Red, 2, 2), obj(1, Category::Dog, Color::Red, 3, 3)]);
        let facts: Vec<_> = derive_relations(&s).into_iter().collect();
        assert_eq!(
            facts,
            vec![
                SpatialFact { relation: Relation::NextTo, subject: 0, object: 1 },
                SpatialFact { relation: Relation::NextTo, subject: 1, object: 0 },
            ]
        );
    }

    #[test]
    fn relation_duality_over_many_scenes() {
        let cfg = WorldConfig { max_objects: 8, ..WorldConfig::default() };
        for seed in 0..1000 {
            let s = generate_scene(&cfg, seed).unwrap();
            let facts = derive_relations(&s);
            for f in &facts {
                let dual = SpatialFact { relation: f.relation.dual(), subject: f.object, object: f.subject };
                assert!(facts.contains(&dual), "seed {seed}: {f:?} lacks its dual");
            }
        }
    }

    #[test]
    fn empty_scene_has_three_header_tokens() {
        assert_eq!(serialize_scene(&scene(vec![])).len(), 3);
    }

    #[test]
    fn sign_with_text_is_a_nine_token_tuple() {
        let mut o = obj(0, Category::Sign, Color::Red, 0, 0);
        o.size = SizeClass::Small;
        o.text = Some(OcrWord::Stop);
        let toks = serialize_scene(&scene(vec![o]));
        assert_eq!(toks.len() - 3, 9);
        assert_eq!(ImageToken::from_id(toks[10]), Some(ImageToken::Txt));
        assert_eq!(ImageToken::from_id(toks[11]), Some(ImageToken::Word(OcrWord::Stop)));
    }

    #[test]
    fn round_trip_thousand_scenes() {
        let cfg = WorldConfig { max_objects: 10, ..WorldConfig::default() };
        for seed in 0..1000 {
            let s = generate_scene(&cfg, seed).unwrap();
            let back = deserialize_scene(&serialize_scene(&s), s.id, s.seed).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn image_ids_are_a_bijection() {
        for id in 0..IMAGE_VOCAB_SIZE as u32 {
            assert_eq!(ImageToken::from_id(id).unwrap().id(), id);
        }
        assert!(ImageToken::from_id(IMAGE_VOCAB_SIZE as u32).is_none());
    }

    #[test]
    fn truncated_tokens_are_rejected() {
        let s = generate_scene(&WorldConfig::default(), 3).unwrap();
        let toks = serialize_scene(&s);
        assert!(deserialize_scene(&toks[..toks.len() - 1], 0, 0).is_err());
    }

    #[test]
    fn count_identity() {
        for seed in 0..1000 {
            let s = generate_scene(&WorldConfig::default(), seed).unwrap();
            let total: usize = Category::ALL.iter().map(|&c| s.count(c)).sum();
            assert_eq!(total, s.objects.len());
        }
    }

    #[test]
    fn count_examples() {
        let none = scene(vec![obj(0, Category::Cat, Color::Red, 0, 0)]);
        assert_eq!(count_category(&none, "duck").unwrap(), 0);
        let apples = scene(vec![
            obj(0, Category::Apple, Color::Red, 0, 0),
            obj(1, Category::Apple, Color::Green, 0, 1),
            obj(2, Category::Apple, Color::Red, 3, 1),
        ]);
        assert_eq!(count_category(&apples, "apple").unwrap(), 3);
        assert!(matches!(count_category(&apples, "zebra"), Err(Error::Vocabulary(_))));
    }
}
