//! Deterministic synthetic shapes world.
//!
//! Scenes are small grids of colored, sized shapes. Each scene carries a
//! set of template questions with ground-truth answer distributions:
//! questions with a unique referent get a one-hot label, questions with
//! `k` matching referents spread mass `1/k` per referent, so label
//! entropies span everything from zero up to `ln 4` by construction.
//!
//! The generated dataset is a pure function of `(seed, config)` and
//! serializes to JSON Lines: one manifest record (format version,
//! config, vocabularies, record counts) followed by scene records and
//! question records.

use crate::nn::rng_stream;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const PAD_TOKEN: u32 = 0;
pub const START_TOKEN: u32 = 1;
pub const END_TOKEN: u32 = 2;
pub const UNK_TOKEN: u32 = 3;

const SPECIAL_WORDS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Highest count the answer vocabulary can express; scene generation
/// caps per-shape object counts at this value.
pub const MAX_COUNT: usize = 7;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

/// Contents of one grid cell; `None` is an empty cell.
pub type Cell = Option<ObjectSpec>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u32,
    pub grid_size: u32,
    pub cells: Vec<Cell>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), String> {
        let expected = (self.grid_size * self.grid_size) as usize;
        if self.cells.len() != expected {
            return Err(format!(
                "scene {} has {} cells, expected {}",
                self.scene_id,
                self.cells.len(),
                expected
            ));
        }
        if self.cells.iter().all(|c| c.is_none()) {
            return Err(format!("scene {} has no objects", self.scene_id));
        }
        Ok(())
    }

    pub fn objects(&self) -> impl Iterator<Item = (usize, &ObjectSpec)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|o| (i, o)))
    }
}

/// Token sequence of a question, terminated by the end token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuestionTokens {
    pub tokens: Vec<u32>,
    pub max_length: usize,
}

impl QuestionTokens {
    pub fn validate(&self, vocab_size: usize) -> Result<(), String> {
        if self.tokens.is_empty() || self.tokens.len() > self.max_length {
            return Err(format!(
                "question length {} outside 1..={}",
                self.tokens.len(),
                self.max_length
            ));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(format!("token id {bad} outside vocabulary of {vocab_size}"));
        }
        let end_count = self.tokens.iter().filter(|&&t| t == END_TOKEN).count();
        if end_count != 1 || *self.tokens.last().unwrap() != END_TOKEN {
            return Err("question must contain exactly one end token, at the final position".into());
        }
        Ok(())
    }

    /// Content tokens, i.e. everything before the end token.
    pub fn content(&self) -> &[u32] {
        &self.tokens[..self.tokens.len() - 1]
    }
}

/// Soft supervision target: a probability vector over the answer
/// vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruthLabel {
    pub answer_distribution: Vec<f64>,
}

impl GroundTruthLabel {
    pub fn validate(&self, answer_vocab_size: usize) -> Result<(), String> {
        if self.answer_distribution.len() != answer_vocab_size {
            return Err(format!(
                "label has {} entries, answer vocabulary has {answer_vocab_size}",
                self.answer_distribution.len()
            ));
        }
        if self.answer_distribution.iter().any(|&p| p < 0.0) {
            return Err("label has a negative entry".into());
        }
        let sum: f64 = self.answer_distribution.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("label sums to {sum}, expected 1 within 1e-9"));
        }
        Ok(())
    }
}

/// Token/string bijection. Index 0..=3 are the fixed special tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self, String> {
        let mut seen = HashSet::new();
        for w in &words {
            if !seen.insert(w.clone()) {
                return Err(format!("duplicate vocabulary entry {w:?}"));
            }
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabPair {
    pub question: Vocab,
    pub answer: Vocab,
}

impl VocabPair {
    pub fn validate(&self) -> Result<(), String> {
        for (i, special) in SPECIAL_WORDS.iter().enumerate() {
            if self.question.word(i as u32) != Some(*special) {
                return Err(format!(
                    "question vocabulary must have {special:?} at index {i}"
                ));
            }
        }
        Vocab::from_words(self.question.words.clone())?;
        Vocab::from_words(self.answer.words.clone())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub scene_count: u32,
    pub grid_size: u32,
    pub questions_per_scene: u32,
    pub max_question_len: usize,
    /// Probability that a cell holds an object.
    pub fill_probability: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            scene_count: 400,
            grid_size: 3,
            questions_per_scene: 12,
            max_question_len: 12,
            fill_probability: 0.45,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.scene_count < 1 {
            return Err(WorldError::Config("scene_count must be >= 1".into()));
        }
        if self.grid_size < 2 {
            return Err(WorldError::Config("grid_size must be >= 2".into()));
        }
        if self.questions_per_scene < 2 {
            return Err(WorldError::Config(
                "questions_per_scene must be >= 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.fill_probability) {
            return Err(WorldError::Config(
                "fill_probability must be within [0, 1]".into(),
            ));
        }
        // Longest template: "what color is the shape at rI cJ <end>".
        if self.max_question_len < 10 {
            return Err(WorldError::Config(
                "max_question_len must be >= 10 to fit every template".into(),
            ));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        (self.grid_size * self.grid_size) as usize
    }
}

/// Dimensionality of a region feature row: shape one-hot, color one-hot,
/// size one-hot, then normalized grid coordinates.
pub const FEATURE_DIM: usize = 3 + 4 + 2 + 2;

/// Region feature matrix for one scene (`regions x FEATURE_DIM`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub data: Array2<f64>,
}

impl ImageFeatures {
    pub fn regions(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Fixed symbolic embedding of a scene: one row per cell with attribute
/// one-hots (all zero for empty cells) and normalized coordinates.
pub fn scene_to_features(scene: &Scene) -> ImageFeatures {
    let g = scene.grid_size as usize;
    let denom = (g - 1).max(1) as f64;
    let mut data = Array2::zeros((g * g, FEATURE_DIM));
    for (idx, cell) in scene.cells.iter().enumerate() {
        let row = idx / g;
        let col = idx % g;
        if let Some(obj) = cell {
            data[[idx, obj.shape as usize]] = 1.0;
            data[[idx, 3 + obj.color as usize]] = 1.0;
            data[[idx, 7 + obj.size as usize]] = 1.0;
        }
        data[[idx, 9]] = row as f64 / denom;
        data[[idx, 10]] = col as f64 / denom;
    }
    ImageFeatures { data }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub scene_id: u32,
    pub tokens: QuestionTokens,
    pub text: String,
    pub label: GroundTruthLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub vocab: VocabPair,
    pub scenes: Vec<Scene>,
    pub questions: Vec<QuestionRecord>,
}

impl Dataset {
    pub fn scene(&self, scene_id: u32) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    /// Indices of `questions` grouped by scene, in dataset order.
    pub fn questions_by_scene(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, q) in self.questions.iter().enumerate() {
            map.entry(q.scene_id).or_default().push(i);
        }
        map
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        self.vocab.validate().map_err(WorldError::Integrity)?;
        let scene_ids: HashSet<u32> = self.scenes.iter().map(|s| s.scene_id).collect();
        if scene_ids.len() != self.scenes.len() {
            return Err(WorldError::Integrity("duplicate scene_id".into()));
        }
        for scene in &self.scenes {
            scene.validate().map_err(WorldError::Integrity)?;
        }
        for q in &self.questions {
            if !scene_ids.contains(&q.scene_id) {
                return Err(WorldError::Integrity(format!(
                    "question references unknown scene_id {}",
                    q.scene_id
                )));
            }
            q.tokens
                .validate(self.vocab.question.len())
                .map_err(WorldError::Integrity)?;
            q.label
                .validate(self.vocab.answer.len())
                .map_err(WorldError::Integrity)?;
        }
        for (scene_id, idxs) in self.questions_by_scene() {
            let distinct: HashSet<&Vec<u32>> =
                idxs.iter().map(|&i| &self.questions[i].tokens.tokens).collect();
            if distinct.len() < 2 {
                return Err(WorldError::Integrity(format!(
                    "scene {scene_id} has fewer than 2 distinct questions"
                )));
            }
        }
        Ok(())
    }
}

fn build_question_vocab(grid_size: u32) -> Vocab {
    let mut words: Vec<String> = SPECIAL_WORDS.iter().map(|s| s.to_string()).collect();
    for w in [
        "what", "color", "size", "is", "the", "a", "there", "how", "many", "at", "are", "shape",
    ] {
        words.push(w.into());
    }
    for s in Shape::ALL {
        words.push(s.word().into());
    }
    for c in Color::ALL {
        words.push(c.word().into());
    }
    for s in Size::ALL {
        words.push(s.word().into());
    }
    for r in 0..grid_size {
        words.push(format!("r{r}"));
    }
    for c in 0..grid_size {
        words.push(format!("c{c}"));
    }
    Vocab::from_words(words).expect("static vocabulary is duplicate-free")
}

fn build_answer_vocab() -> Vocab {
    let mut words: Vec<String> = Vec::new();
    for c in Color::ALL {
        words.push(c.word().into());
    }
    for s in Size::ALL {
        words.push(s.word().into());
    }
    words.push("yes".into());
    words.push("no".into());
    for n in 0..=MAX_COUNT {
        words.push(n.to_string());
    }
    Vocab::from_words(words).expect("static vocabulary is duplicate-free")
}

/// Convert a whitespace-separated question string to tokens, mapping
/// unknown words to `<unk>` and appending the end token.
pub fn tokenize(text: &str, vocab: &Vocab, max_length: usize) -> Result<QuestionTokens, WorldError> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        tokens.push(vocab.id(word).unwrap_or(UNK_TOKEN));
    }
    tokens.push(END_TOKEN);
    if tokens.len() > max_length {
        return Err(WorldError::Config(format!(
            "question has {} tokens, exceeding max length {max_length}",
            tokens.len()
        )));
    }
    Ok(QuestionTokens { tokens, max_length })
}

/// Render tokens back to words, omitting the end token.
pub fn detokenize(tokens: &QuestionTokens, vocab: &Vocab) -> String {
    tokens
        .content()
        .iter()
        .map(|&t| vocab.word(t).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TemplateKind {
    /// Attribute of a shape; the only template with soft labels.
    Attribute,
    Position,
    Count,
    Existence,
}

struct TemplateContext<'a> {
    scene: &'a Scene,
    vocab: &'a VocabPair,
    max_len: usize,
}

impl<'a> TemplateContext<'a> {
    fn question(&self, words: &[&str]) -> QuestionTokens {
        let mut tokens: Vec<u32> = words
            .iter()
            .map(|w| self.vocab.question.id(w).expect("template word in vocabulary"))
            .collect();
        tokens.push(END_TOKEN);
        assert!(tokens.len() <= self.max_len);
        QuestionTokens {
            tokens,
            max_length: self.max_len,
        }
    }

    fn label_from_counts(&self, mass: &BTreeMap<&str, f64>) -> GroundTruthLabel {
        let mut dist = vec![0.0; self.vocab.answer.len()];
        for (word, m) in mass {
            let idx = self.vocab.answer.id(word).expect("answer word in vocabulary");
            dist[idx as usize] += m;
        }
        GroundTruthLabel {
            answer_distribution: dist,
        }
    }

    fn one_hot(&self, word: &str) -> GroundTruthLabel {
        let mut mass = BTreeMap::new();
        mass.insert(word, 1.0);
        self.label_from_counts(&mass)
    }
}

/// All template questions valid for a scene, in a fixed deterministic
/// order, each with its ground-truth label.
fn candidate_questions(
    scene: &Scene,
    vocab: &VocabPair,
    max_len: usize,
) -> Vec<(QuestionTokens, String, GroundTruthLabel, TemplateKind)> {
    let ctx = TemplateContext {
        scene,
        vocab,
        max_len,
    };
    let mut out = Vec::new();
    let mut push = |tokens: QuestionTokens, label: GroundTruthLabel, kind: TemplateKind| {
        let text = detokenize(&tokens, &vocab.question);
        out.push((tokens, text, label, kind));
    };

    // Attribute of shape: mass 1/k per matching object.
    for shape in Shape::ALL {
        let matching: Vec<&ObjectSpec> =
            ctx.scene.objects().map(|(_, o)| o).filter(|o| o.shape == shape).collect();
        if matching.is_empty() {
            continue;
        }
        let share = 1.0 / matching.len() as f64;
        let mut color_mass: BTreeMap<&str, f64> = BTreeMap::new();
        let mut size_mass: BTreeMap<&str, f64> = BTreeMap::new();
        for o in &matching {
            *color_mass.entry(o.color.word()).or_insert(0.0) += share;
            *size_mass.entry(o.size.word()).or_insert(0.0) += share;
        }
        push(
            ctx.question(&["what", "color", "is", "the", shape.word()]),
            ctx.label_from_counts(&color_mass),
            TemplateKind::Attribute,
        );
        push(
            ctx.question(&["what", "size", "is", "the", shape.word()]),
            ctx.label_from_counts(&size_mass),
            TemplateKind::Attribute,
        );
    }

    // Color of the shape at a grid position: unique referent, one-hot.
    let g = ctx.scene.grid_size as usize;
    for (idx, obj) in ctx.scene.objects() {
        let r = format!("r{}", idx / g);
        let c = format!("c{}", idx % g);
        push(
            ctx.question(&["what", "color", "is", "the", "shape", "at", &r, &c]),
            ctx.one_hot(obj.color.word()),
            TemplateKind::Position,
        );
    }

    // Count of shape: one-hot on the count.
    for shape in Shape::ALL {
        let count = ctx.scene.objects().filter(|(_, o)| o.shape == shape).count();
        let count_word = count.to_string();
        push(
            ctx.question(&["how", "many", shape.word(), "are", "there"]),
            ctx.one_hot(&count_word),
            TemplateKind::Count,
        );
    }

    // Existence of a colored shape: yes/no one-hot.
    for color in Color::ALL {
        for shape in Shape::ALL {
            let exists = ctx
                .scene
                .objects()
                .any(|(_, o)| o.shape == shape && o.color == color);
            push(
                ctx.question(&["is", "there", "a", color.word(), shape.word()]),
                ctx.one_hot(if exists { "yes" } else { "no" }),
                TemplateKind::Existence,
            );
        }
    }

    out
}

/// The first scene of every dataset: four circles in all four colors.
/// Its color question has label entropy exactly `ln 4` and its count
/// questions are one-hot, anchoring the corpus entropy spread.
fn anchor_scene(grid_size: u32) -> Scene {
    let cells_total = (grid_size * grid_size) as usize;
    let mut cells: Vec<Cell> = vec![None; cells_total];
    for (i, color) in Color::ALL.iter().enumerate() {
        cells[i] = Some(ObjectSpec {
            shape: Shape::Circle,
            color: *color,
            size: if i % 2 == 0 { Size::Small } else { Size::Large },
        });
    }
    Scene {
        scene_id: 0,
        grid_size,
        cells,
    }
}

fn random_scene(scene_id: u32, config: &WorldConfig, seed: u64) -> Scene {
    let mut rng = rng_stream(seed, "world.scene", scene_id as u64);
    let cells_total = config.regions();
    let mut cells: Vec<Cell> = Vec::with_capacity(cells_total);
    for _ in 0..cells_total {
        if rng.gen::<f64>() < config.fill_probability {
            let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
            let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
            let size = Size::ALL[rng.gen_range(0..Size::ALL.len())];
            cells.push(Some(ObjectSpec { shape, color, size }));
        } else {
            cells.push(None);
        }
    }
    // Keep counts expressible by the answer vocabulary.
    for shape in Shape::ALL {
        let mut seen = 0;
        for cell in cells.iter_mut() {
            if cell.map(|o| o.shape) == Some(shape) {
                seen += 1;
                if seen > MAX_COUNT {
                    *cell = None;
                }
            }
        }
    }
    if cells.iter().all(|c| c.is_none()) {
        let at = rng.gen_range(0..cells_total);
        cells[at] = Some(ObjectSpec {
            shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
            size: Size::ALL[rng.gen_range(0..Size::ALL.len())],
        });
    }
    Scene {
        scene_id,
        grid_size: config.grid_size,
        cells,
    }
}

/// Generate the full dataset. Pure in `(seed, config)`: scene contents
/// and question selections derive from per-scene RNG streams.
pub fn generate_dataset(seed: u64, config: &WorldConfig) -> Result<Dataset, WorldError> {
    config.validate()?;
    let vocab = VocabPair {
        question: build_question_vocab(config.grid_size),
        answer: build_answer_vocab(),
    };

    let mut scenes = Vec::with_capacity(config.scene_count as usize);
    scenes.push(anchor_scene(config.grid_size));
    for scene_id in 1..config.scene_count {
        scenes.push(random_scene(scene_id, config, seed));
    }

    let mut questions = Vec::new();
    for scene in &scenes {
        let mut pool = candidate_questions(scene, &vocab, config.max_question_len);
        let mut rng = rng_stream(seed, "world.questions", scene.scene_id as u64);
        let take = (config.questions_per_scene as usize).min(pool.len());
        let mut selected: Vec<(QuestionTokens, String, GroundTruthLabel, TemplateKind)> = Vec::new();
        if scene.scene_id == 0 {
            // Force the entropy anchors into the dataset.
            let color_q = tokenize("what color is the circle", &vocab.question, config.max_question_len)?;
            let count_q = tokenize("how many square are there", &vocab.question, config.max_question_len)?;
            for anchor in [&color_q, &count_q] {
                if let Some(pos) = pool.iter().position(|(t, _, _, _)| t == anchor) {
                    selected.push(pool.remove(pos));
                }
            }
        }
        // Attribute questions carry the label-entropy spread, so every
        // scene keeps all of its attribute questions, then one count
        // question so the counting template stays represented, before
        // the rest of the pool is drawn at random.
        let mut rest = Vec::new();
        for candidate in pool {
            if candidate.3 == TemplateKind::Attribute && selected.len() < take {
                selected.push(candidate);
            } else {
                rest.push(candidate);
            }
        }
        if selected.len() < take {
            let counts: Vec<usize> = rest
                .iter()
                .enumerate()
                .filter(|(_, c)| c.3 == TemplateKind::Count)
                .map(|(i, _)| i)
                .collect();
            if !counts.is_empty() {
                let pick = counts[rng.gen_range(0..counts.len())];
                selected.push(rest.remove(pick));
            }
        }
        rest.shuffle(&mut rng);
        while selected.len() < take {
            selected.push(rest.remove(0));
        }
        for (tokens, text, label, _) in selected {
            questions.push(QuestionRecord {
                scene_id: scene.scene_id,
                tokens,
                text,
                label,
            });
        }
    }

    let dataset = Dataset {
        config: config.clone(),
        vocab,
        scenes,
        questions,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    format_version: u32,
    config: WorldConfig,
    vocab: VocabPair,
    scene_count: usize,
    question_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Manifest(ManifestRecord),
    Scene(Scene),
    Question(QuestionRecord),
}

pub fn write_dataset_to(dataset: &Dataset, mut w: impl Write) -> Result<(), WorldError> {
    let manifest = Record::Manifest(ManifestRecord {
        format_version: DATASET_FORMAT_VERSION,
        config: dataset.config.clone(),
        vocab: dataset.vocab.clone(),
        scene_count: dataset.scenes.len(),
        question_count: dataset.questions.len(),
    });
    let mut emit = |record: &Record| -> Result<(), WorldError> {
        let line = serde_json::to_string(record)
            .map_err(|e| WorldError::Integrity(format!("serialization failed: {e}")))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    };
    emit(&manifest)?;
    for scene in &dataset.scenes {
        emit(&Record::Scene(scene.clone()))?;
    }
    for q in &dataset.questions {
        emit(&Record::Question(q.clone()))?;
    }
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), WorldError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_dataset_to(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset_from(r: impl BufRead) -> Result<Dataset, WorldError> {
    let mut manifest: Option<ManifestRecord> = None;
    let mut scenes = Vec::new();
    let mut questions = Vec::new();
    let mut line_no = 0;
    for line in r.lines() {
        line_no += 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| WorldError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        match record {
            Record::Manifest(m) => {
                if line_no != 1 {
                    return Err(WorldError::Parse {
                        line: line_no,
                        msg: "manifest record must be the first line".into(),
                    });
                }
                if m.format_version != DATASET_FORMAT_VERSION {
                    return Err(WorldError::Parse {
                        line: line_no,
                        msg: format!(
                            "unsupported format_version {} (expected {DATASET_FORMAT_VERSION})",
                            m.format_version
                        ),
                    });
                }
                manifest = Some(m);
            }
            Record::Scene(s) => scenes.push(s),
            Record::Question(q) => questions.push(q),
        }
    }
    let manifest = manifest.ok_or(WorldError::Parse {
        line: 1,
        msg: "missing manifest record".into(),
    })?;
    if scenes.len() != manifest.scene_count || questions.len() != manifest.question_count {
        return Err(WorldError::Parse {
            line: line_no + 1,
            msg: format!(
                "file ends after {} scenes and {} questions, manifest declares {} and {}",
                scenes.len(),
                questions.len(),
                manifest.scene_count,
                manifest.question_count
            ),
        });
    }
    let dataset = Dataset {
        config: manifest.config,
        vocab: manifest.vocab,
        scenes,
        questions,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, WorldError> {
    let file = File::open(path)?;
    read_dataset_from(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::entropy_slice;

    fn tiny_config() -> WorldConfig {
        WorldConfig {
            scene_count: 12,
            grid_size: 3,
            questions_per_scene: 6,
            max_question_len: 12,
            fill_probability: 0.45,
        }
    }

    fn scene_with(cells: Vec<Cell>, grid: u32) -> Scene {
        Scene {
            scene_id: 9,
            grid_size: grid,
            cells,
        }
    }

    fn obj(shape: Shape, color: Color, size: Size) -> Cell {
        Some(ObjectSpec { shape, color, size })
    }

    #[test]
    fn unique_referent_yields_one_hot() {
        let mut cells = vec![None; 9];
        cells[4] = obj(Shape::Circle, Color::Red, Size::Small);
        let scene = scene_with(cells, 3);
        let vocab = VocabPair {
            question: build_question_vocab(3),
            answer: build_answer_vocab(),
        };
        let pool = candidate_questions(&scene, &vocab, 12);
        let color_q = tokenize("what color is the circle", &vocab.question, 12).unwrap();
        let (_, _, label, _) = pool.iter().find(|(t, _, _, _)| *t == color_q).unwrap();
        let red = vocab.answer.id("red").unwrap() as usize;
        assert_eq!(label.answer_distribution[red], 1.0);
        assert_eq!(label.answer_distribution.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn two_referents_split_mass_evenly() {
        let mut cells = vec![None; 9];
        cells[0] = obj(Shape::Circle, Color::Red, Size::Small);
        cells[5] = obj(Shape::Circle, Color::Blue, Size::Small);
        let scene = scene_with(cells, 3);
        let vocab = VocabPair {
            question: build_question_vocab(3),
            answer: build_answer_vocab(),
        };
        let pool = candidate_questions(&scene, &vocab, 12);
        let color_q = tokenize("what color is the circle", &vocab.question, 12).unwrap();
        let (_, _, label, _) = pool.iter().find(|(t, _, _, _)| *t == color_q).unwrap();
        let red = vocab.answer.id("red").unwrap() as usize;
        let blue = vocab.answer.id("blue").unwrap() as usize;
        assert_eq!(label.answer_distribution[red], 0.5);
        assert_eq!(label.answer_distribution[blue], 0.5);
    }

    #[test]
    fn generation_is_deterministic() {
        let config = tiny_config();
        let a = generate_dataset(42, &config).unwrap();
        let b = generate_dataset(42, &config).unwrap();
        assert_eq!(a, b);
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        write_dataset_to(&a, &mut bytes_a).unwrap();
        write_dataset_to(&b, &mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let c = generate_dataset(43, &config).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn round_trip_identity() {
        let dataset = generate_dataset(7, &tiny_config()).unwrap();
        let mut bytes = Vec::new();
        write_dataset_to(&dataset, &mut bytes).unwrap();
        let back = read_dataset_from(std::io::Cursor::new(bytes)).unwrap();
        assert_eq!(dataset, back);
    }

    #[test]
    fn truncated_file_reports_line() {
        let dataset = generate_dataset(7, &tiny_config()).unwrap();
        let mut bytes = Vec::new();
        write_dataset_to(&dataset, &mut bytes).unwrap();
        // Drop the trailing half of the file.
        let keep = bytes.len() / 2;
        let err = read_dataset_from(std::io::Cursor::new(&bytes[..keep])).unwrap_err();
        match err {
            WorldError::Parse { line, .. } => assert!(line > 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_scene_reference_is_integrity_error() {
        let mut dataset = generate_dataset(7, &tiny_config()).unwrap();
        dataset.questions[0].scene_id = 999;
        let mut bytes = Vec::new();
        write_dataset_to(&dataset, &mut bytes).unwrap();
        let err = read_dataset_from(std::io::Cursor::new(bytes)).unwrap_err();
        assert!(matches!(err, WorldError::Integrity(_)));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut config = tiny_config();
        config.scene_count = 0;
        assert!(matches!(
            generate_dataset(1, &config),
            Err(WorldError::Config(_))
        ));
        let mut config = tiny_config();
        config.questions_per_scene = 1;
        assert!(matches!(
            generate_dataset(1, &config),
            Err(WorldError::Config(_))
        ));
    }

    #[test]
    fn features_follow_encoding_rule() {
        let mut cells = vec![None; 9];
        cells[4] = obj(Shape::Triangle, Color::Yellow, Size::Large);
        let scene = scene_with(cells, 3);
        let feats = scene_to_features(&scene);
        assert_eq!(feats.regions(), 9);
        assert_eq!(feats.dim(), FEATURE_DIM);
        // Empty cell: one-hots zero, coordinates set.
        let empty = feats.data.row(0);
        assert!(empty.iter().take(9).all(|&v| v == 0.0));
        assert_eq!(empty[9], 0.0);
        assert_eq!(empty[10], 0.0);
        // Occupied center cell of a 3x3 grid.
        let center = feats.data.row(4);
        assert_eq!(center[Shape::Triangle as usize], 1.0);
        assert_eq!(center[3 + Color::Yellow as usize], 1.0);
        assert_eq!(center[7 + Size::Large as usize], 1.0);
        assert_eq!(center[9], 0.5);
        assert_eq!(center[10], 0.5);

        // Changing one cell changes exactly that feature row.
        let mut cells2 = scene.cells.clone();
        cells2[7] = obj(Shape::Circle, Color::Red, Size::Small);
        let feats2 = scene_to_features(&scene_with(cells2, 3));
        for r in 0..9 {
            let differs = feats.data.row(r) != feats2.data.row(r);
            assert_eq!(differs, r == 7);
        }
    }

    #[test]
    fn label_entropies_cover_spread_and_labels_are_valid() {
        let config = WorldConfig {
            scene_count: 200,
            ..tiny_config()
        };
        let dataset = generate_dataset(5, &config).unwrap();
        assert!(dataset.questions.len() >= 1000);
        let mut max_h: f64 = 0.0;
        let mut min_h = f64::INFINITY;
        for q in &dataset.questions {
            q.label.validate(dataset.vocab.answer.len()).unwrap();
            let h = entropy_slice(&q.label.answer_distribution);
            max_h = max_h.max(h);
            min_h = min_h.min(h);
        }
        assert_eq!(min_h, 0.0);
        assert!(max_h >= (4.0f64).ln() - 1e-9);
    }

    #[test]
    fn every_scene_has_two_distinct_questions() {
        let dataset = generate_dataset(11, &tiny_config()).unwrap();
        for (_, idxs) in dataset.questions_by_scene() {
            let distinct: HashSet<&Vec<u32>> = idxs
                .iter()
                .map(|&i| &dataset.questions[i].tokens.tokens)
                .collect();
            assert!(distinct.len() >= 2);
        }
    }

    #[test]
    fn tokenize_detokenize_and_unknowns() {
        let vocab = build_question_vocab(3);
        let q = tokenize("what color is the blorp", &vocab, 12).unwrap();
        assert_eq!(q.tokens[4], UNK_TOKEN);
        assert_eq!(*q.tokens.last().unwrap(), END_TOKEN);
        assert_eq!(detokenize(&q, &vocab), "what color is the <unk>");
    }
}
