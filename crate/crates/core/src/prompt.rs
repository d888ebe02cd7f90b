//! Prompt rendering for every prompting strategy.
//!
//! Templates are plain UTF-8 files with `{placeholder}` substitution. The
//! text above a line consisting only of `---` is the system message; the rest
//! is the user message. Recognized placeholders are `{text}`, `{labels}`,
//! `{task}` and `{format}`; `{{` and `}}` produce literal braces.
//!
//! `{text}` expands to the source text inside a `"""` fenced block and
//! `{format}` expands to the labeled-section answer format derived from the
//! strategy, so the sections a prompt demands and the sections the parser
//! looks for come from the same table.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{ClassificationExample, GenerationExample, LabelSet};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("strategy {strategy} cannot be used for {task} prompts")]
    Strategy { strategy: Strategy, task: TaskKind },
    #[error("template {name}: {message}")]
    Template { name: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Generation,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Generation => "generation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Classify the source-language text directly.
    Standard,
    /// Translate to English, then classify the translation, in one prompt.
    Cotr,
    /// Classify text already translated by an external MT system.
    Pretranslated,
    /// Generate a source-language headline directly from the article.
    Direct,
    /// Generate an English headline from the source article, then back-translate it.
    Half,
    /// Translate the article, generate an English headline, then back-translate it.
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Standard,
        Strategy::Cotr,
        Strategy::Pretranslated,
        Strategy::Direct,
        Strategy::Half,
        Strategy::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::Cotr => "cotr",
            Strategy::Pretranslated => "pretranslated",
            Strategy::Direct => "direct",
            Strategy::Half => "half",
            Strategy::Full => "full",
        }
    }

    /// Column heading used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::Standard => "Standard",
            Strategy::Cotr => "CoTR",
            Strategy::Pretranslated => "MT+Prompt",
            Strategy::Direct => "Without",
            Strategy::Half => "Half",
            Strategy::Full => "Full",
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            Strategy::Standard | Strategy::Cotr | Strategy::Pretranslated => TaskKind::Classification,
            Strategy::Direct | Strategy::Half | Strategy::Full => TaskKind::Generation,
        }
    }

    /// Sections the model is asked to emit, in order.
    pub fn expected_sections(self) -> &'static [Section] {
        use Section::*;
        match self {
            Strategy::Standard | Strategy::Pretranslated => &[Label],
            Strategy::Cotr => &[Translation, Label],
            Strategy::Direct => &[MarathiHeadline],
            Strategy::Half => &[EnglishHeadline, MarathiHeadline],
            Strategy::Full => &[EnglishArticle, EnglishHeadline, MarathiHeadline],
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                PromptError::Validation(format!(
                    "unknown strategy {s:?}; expected one of {}",
                    Strategy::ALL.map(Strategy::name).join(", ")
                ))
            })
    }
}

/// A labeled section of a model answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Section {
    Translation,
    Label,
    EnglishArticle,
    EnglishHeadline,
    MarathiHeadline,
}

impl Section {
    pub const ALL: [Section; 5] = [
        Section::Translation,
        Section::Label,
        Section::EnglishArticle,
        Section::EnglishHeadline,
        Section::MarathiHeadline,
    ];

    /// Header text, without the trailing colon.
    pub fn header(self) -> &'static str {
        match self {
            Section::Translation => "Translation",
            Section::Label => "Label",
            Section::EnglishArticle => "English Article",
            Section::EnglishHeadline => "English Headline",
            Section::MarathiHeadline => "Marathi Headline",
        }
    }

    fn placeholder(self) -> &'static str {
        match self {
            Section::Translation => "<English translation of the text>",
            Section::Label => "<exactly one label from the list>",
            Section::EnglishArticle => "<English translation of the article>",
            Section::EnglishHeadline => "<headline in English>",
            Section::MarathiHeadline => "<headline in Marathi>",
        }
    }

    /// Sections carrying a translation of the input rather than an answer.
    pub fn is_translation(self) -> bool {
        matches!(self, Section::Translation | Section::EnglishArticle)
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.header())
    }
}

/// A fully rendered prompt plus the answer sections it demands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub system_text: String,
    pub user_text: String,
    pub expected_sections: Vec<Section>,
    pub strategy: Strategy,
    pub example_id: String,
}

impl PromptSpec {
    /// Human-readable rendering used for golden files.
    pub fn render(&self) -> String {
        let sections: Vec<String> = self
            .expected_sections
            .iter()
            .map(|s| serde_json::to_value(s).unwrap().as_str().unwrap().to_owned())
            .collect();
        format!(
            "[strategy] {}\n[example] {}\n[sections] {}\n[system]\n{}\n[user]\n{}\n",
            self.strategy,
            self.example_id,
            sections.join(", "),
            self.system_text,
            self.user_text
        )
    }
}

pub const TEXT_FENCE: &str = "\"\"\"";
const ESCAPED_FENCE: &str = "\\\"\\\"\\\"";

/// Escape the text fence so embedded text cannot close its block early.
pub fn escape_text(text: &str) -> String {
    text.replace(TEXT_FENCE, ESCAPED_FENCE)
}

fn fenced(text: &str) -> String {
    format!("{TEXT_FENCE}\n{}\n{TEXT_FENCE}", escape_text(text))
}

/// Answer-format instructions for the given sections.
pub fn format_block(sections: &[Section]) -> String {
    let mut out = String::from("Answer using exactly these lines, in this order:");
    for s in sections {
        out.push('\n');
        out.push_str(s.header());
        out.push_str(": ");
        out.push_str(s.placeholder());
    }
    out
}

/// Identifies one template file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateName {
    StandardClassification,
    CotrClassification,
    PretranslatedClassification,
    DirectGeneration,
    HalfGeneration,
    FullGeneration,
    /// First call of two-call half translation: English headline only.
    HalfFirstCall,
    /// First call of two-call full translation: article and English headline.
    FullFirstCall,
    /// Second call of two-call mode: back-translate an English headline.
    BackTranslation,
}

impl TemplateName {
    pub const ALL: [TemplateName; 9] = [
        TemplateName::StandardClassification,
        TemplateName::CotrClassification,
        TemplateName::PretranslatedClassification,
        TemplateName::DirectGeneration,
        TemplateName::HalfGeneration,
        TemplateName::FullGeneration,
        TemplateName::HalfFirstCall,
        TemplateName::FullFirstCall,
        TemplateName::BackTranslation,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateName::StandardClassification => "standard_classification",
            TemplateName::CotrClassification => "cotr_classification",
            TemplateName::PretranslatedClassification => "pretranslated_classification",
            TemplateName::DirectGeneration => "direct_generation",
            TemplateName::HalfGeneration => "half_translation_generation",
            TemplateName::FullGeneration => "full_translation_generation",
            TemplateName::HalfFirstCall => "half_translation_first_call",
            TemplateName::FullFirstCall => "full_translation_first_call",
            TemplateName::BackTranslation => "back_translation",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateName::StandardClassification => include_str!("../templates/standard_classification.txt"),
            TemplateName::CotrClassification => include_str!("../templates/cotr_classification.txt"),
            TemplateName::PretranslatedClassification => {
                include_str!("../templates/pretranslated_classification.txt")
            }
            TemplateName::DirectGeneration => include_str!("../templates/direct_generation.txt"),
            TemplateName::HalfGeneration => include_str!("../templates/half_translation_generation.txt"),
            TemplateName::FullGeneration => include_str!("../templates/full_translation_generation.txt"),
            TemplateName::HalfFirstCall => include_str!("../templates/half_translation_first_call.txt"),
            TemplateName::FullFirstCall => include_str!("../templates/full_translation_first_call.txt"),
            TemplateName::BackTranslation => include_str!("../templates/back_translation.txt"),
        }
    }

    fn allowed(self) -> &'static [Placeholder] {
        use Placeholder::*;
        match self {
            TemplateName::StandardClassification
            | TemplateName::CotrClassification
            | TemplateName::PretranslatedClassification => &[Text, Labels, Task, Format],
            _ => &[Text, Format],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Placeholder {
    Text,
    Labels,
    Task,
    Format,
}

impl Placeholder {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "text" => Placeholder::Text,
            "labels" => Placeholder::Labels,
            "task" => Placeholder::Task,
            "format" => Placeholder::Format,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(Placeholder),
}

/// A parsed template: system and user parts split into literal pieces and slots.
#[derive(Debug, Clone)]
pub struct Template {
    name: TemplateName,
    system: Vec<Piece>,
    user: Vec<Piece>,
    digest: String,
}

impl Template {
    pub fn parse(name: TemplateName, source: &str) -> Result<Self, PromptError> {
        let err = |message: String| PromptError::Template {
            name: name.file_stem().to_owned(),
            message,
        };
        let source = source.replace("\r\n", "\n");
        let (system, user) = match source.split_once("\n---\n") {
            Some((s, u)) => (s.to_owned(), u.to_owned()),
            None => match source.strip_prefix("---\n") {
                Some(u) => (String::new(), u.to_owned()),
                None => return Err(err("missing `---` line separating system and user text".into())),
            },
        };
        let system = parse_pieces(system.trim(), &err)?;
        let user = parse_pieces(user.trim(), &err)?;
        for piece in system.iter().chain(&user) {
            if let Piece::Slot(p) = piece {
                if !name.allowed().contains(p) {
                    return Err(err(format!("placeholder {p:?} is not available in this template")));
                }
            }
        }
        for required in [Placeholder::Text, Placeholder::Format] {
            let count = user.iter().filter(|p| **p == Piece::Slot(required)).count();
            let in_system = system.contains(&Piece::Slot(required));
            if count != 1 || in_system {
                return Err(err(format!(
                    "user text must contain {required:?} exactly once (found {count})"
                )));
            }
        }
        let digest = hex::encode(Sha256::digest(source.as_bytes()));
        Ok(Self {
            name,
            system,
            user,
            digest,
        })
    }

    pub fn name(&self) -> TemplateName {
        self.name
    }

    /// SHA-256 of the template source.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn render(&self, values: &BTreeMap<Placeholder, String>) -> Result<(String, String), PromptError> {
        let fill = |pieces: &[Piece]| -> Result<String, PromptError> {
            let mut out = String::new();
            for piece in pieces {
                match piece {
                    Piece::Literal(s) => out.push_str(s),
                    Piece::Slot(p) => out.push_str(values.get(p).ok_or_else(|| PromptError::Template {
                        name: self.name.file_stem().to_owned(),
                        message: format!("no value for {p:?}"),
                    })?),
                }
            }
            Ok(out)
        };
        Ok((fill(&self.system)?, fill(&self.user)?))
    }
}

fn parse_pieces(src: &str, err: &impl Fn(String) -> PromptError) -> Result<Vec<Piece>, PromptError> {
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let mut chars = src.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                literal.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                literal.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) => name.push(ch),
                        None => return Err(err("unterminated placeholder".into())),
                    }
                }
                let p = Placeholder::parse(&name).ok_or_else(|| err(format!("unknown placeholder {{{name}}}")))?;
                if !literal.is_empty() {
                    pieces.push(Piece::Literal(std::mem::take(&mut literal)));
                }
                pieces.push(Piece::Slot(p));
            }
            '}' => return Err(err("unmatched `}`; write `}}` for a literal brace".into())),
            _ => literal.push(c),
        }
    }
    if !literal.is_empty() {
        pieces.push(Piece::Literal(literal));
    }
    Ok(pieces)
}

/// The full set of templates used by a run.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, Template>,
}

impl TemplateSet {
    /// Templates compiled into the binary.
    pub fn builtin() -> Self {
        let templates = TemplateName::ALL
            .into_iter()
            .map(|n| (n, Template::parse(n, n.builtin()).expect("built-in templates are valid")))
            .collect();
        Self { templates }
    }

    /// Load `<stem>.txt` files from `dir`, falling back to the built-in
    /// template for any file that is absent.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for name in TemplateName::ALL {
            let path = dir.join(format!("{}.txt", name.file_stem()));
            if path.exists() {
                let source = fs::read_to_string(&path).map_err(|e| PromptError::Template {
                    name: name.file_stem().to_owned(),
                    message: format!("cannot read {}: {e}", path.display()),
                })?;
                set.templates.insert(name, Template::parse(name, &source)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &Template {
        &self.templates[&name]
    }

    /// Template digests keyed by file stem.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.templates
            .values()
            .map(|t| (t.name.file_stem().to_owned(), t.digest.clone()))
            .collect()
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Renders [`PromptSpec`]s from a [`TemplateSet`]. Rendering is pure.
#[derive(Debug, Clone, Default)]
pub struct PromptEngine {
    templates: TemplateSet,
}

impl PromptEngine {
    pub fn new(templates: TemplateSet) -> Self {
        Self { templates }
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    fn render(
        &self,
        template: TemplateName,
        text: &str,
        classification: Option<(&LabelSet, &str)>,
        sections: &[Section],
        strategy: Strategy,
        example_id: &str,
    ) -> Result<PromptSpec, PromptError> {
        let mut values = BTreeMap::new();
        values.insert(Placeholder::Text, fenced(text));
        values.insert(Placeholder::Format, format_block(sections));
        if let Some((labels, task)) = classification {
            values.insert(Placeholder::Labels, labels.joined());
            values.insert(Placeholder::Task, task.trim().to_owned());
        }
        let (system_text, user_text) = self.templates.get(template).render(&values)?;
        Ok(PromptSpec {
            system_text,
            user_text,
            expected_sections: sections.to_vec(),
            strategy,
            example_id: example_id.to_owned(),
        })
    }

    pub fn build_standard_classification_prompt(
        &self,
        ex: &ClassificationExample,
        labels: &LabelSet,
        task_description: &str,
    ) -> Result<PromptSpec, PromptError> {
        check_classification_inputs(&ex.text, task_description)?;
        self.render(
            TemplateName::StandardClassification,
            &ex.text,
            Some((labels, task_description)),
            Strategy::Standard.expected_sections(),
            Strategy::Standard,
            &ex.id,
        )
    }

    pub fn build_cotr_classification_prompt(
        &self,
        ex: &ClassificationExample,
        labels: &LabelSet,
        task_description: &str,
    ) -> Result<PromptSpec, PromptError> {
        check_classification_inputs(&ex.text, task_description)?;
        self.render(
            TemplateName::CotrClassification,
            &ex.text,
            Some((labels, task_description)),
            Strategy::Cotr.expected_sections(),
            Strategy::Cotr,
            &ex.id,
        )
    }

    pub fn build_pretranslated_prompt(
        &self,
        example_id: &str,
        translated_text: &str,
        labels: &LabelSet,
        task_description: &str,
    ) -> Result<PromptSpec, PromptError> {
        check_classification_inputs(translated_text, task_description)?;
        self.render(
            TemplateName::PretranslatedClassification,
            translated_text,
            Some((labels, task_description)),
            Strategy::Pretranslated.expected_sections(),
            Strategy::Pretranslated,
            example_id,
        )
    }

    /// Dispatch on a classification strategy. `translated_text` is required
    /// for [`Strategy::Pretranslated`].
    pub fn build_classification_prompt(
        &self,
        strategy: Strategy,
        ex: &ClassificationExample,
        labels: &LabelSet,
        task_description: &str,
        translated_text: Option<&str>,
    ) -> Result<PromptSpec, PromptError> {
        match strategy {
            Strategy::Standard => self.build_standard_classification_prompt(ex, labels, task_description),
            Strategy::Cotr => self.build_cotr_classification_prompt(ex, labels, task_description),
            Strategy::Pretranslated => self.build_pretranslated_prompt(
                &ex.id,
                translated_text.unwrap_or_default(),
                labels,
                task_description,
            ),
            other => Err(PromptError::Strategy {
                strategy: other,
                task: TaskKind::Classification,
            }),
        }
    }

    /// Single-prompt headline generation for the three generation strategies.
    pub fn build_generation_prompt(
        &self,
        ex: &GenerationExample,
        strategy: Strategy,
    ) -> Result<PromptSpec, PromptError> {
        let template = match strategy {
            Strategy::Direct => TemplateName::DirectGeneration,
            Strategy::Half => TemplateName::HalfGeneration,
            Strategy::Full => TemplateName::FullGeneration,
            other => {
                return Err(PromptError::Strategy {
                    strategy: other,
                    task: TaskKind::Generation,
                })
            }
        };
        check_text(&ex.article)?;
        self.render(
            template,
            &ex.article,
            None,
            strategy.expected_sections(),
            strategy,
            &ex.id,
        )
    }

    /// First call of two-call generation: every section except the
    /// back-translated headline.
    pub fn build_generation_first_call(
        &self,
        ex: &GenerationExample,
        strategy: Strategy,
    ) -> Result<PromptSpec, PromptError> {
        let template = match strategy {
            Strategy::Half => TemplateName::HalfFirstCall,
            Strategy::Full => TemplateName::FullFirstCall,
            Strategy::Direct => return self.build_generation_prompt(ex, strategy),
            other => {
                return Err(PromptError::Strategy {
                    strategy: other,
                    task: TaskKind::Generation,
                })
            }
        };
        check_text(&ex.article)?;
        let sections: Vec<Section> = strategy
            .expected_sections()
            .iter()
            .copied()
            .filter(|s| *s != Section::MarathiHeadline)
            .collect();
        self.render(template, &ex.article, None, &sections, strategy, &ex.id)
    }

    /// Second call of two-call generation: back-translate an English headline.
    pub fn build_back_translation_prompt(
        &self,
        example_id: &str,
        english_headline: &str,
        strategy: Strategy,
    ) -> Result<PromptSpec, PromptError> {
        check_text(english_headline)?;
        self.render(
            TemplateName::BackTranslation,
            english_headline,
            None,
            &[Section::MarathiHeadline],
            strategy,
            example_id,
        )
    }
}

fn check_text(text: &str) -> Result<(), PromptError> {
    if text.trim().is_empty() {
        return Err(PromptError::Validation("input text is empty".into()));
    }
    Ok(())
}

fn check_classification_inputs(text: &str, task_description: &str) -> Result<(), PromptError> {
    check_text(text)?;
    if task_description.trim().is_empty() {
        return Err(PromptError::Validation("task description is empty".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentiment() -> LabelSet {
        LabelSet::new("sentiment", ["Positive", "Negative", "Neutral"]).unwrap()
    }

    fn example(text: &str) -> ClassificationExample {
        ClassificationExample {
            id: "s1".into(),
            text: text.into(),
            gold: "Positive".into(),
        }
    }

    fn article() -> GenerationExample {
        GenerationExample {
            id: "g1".into(),
            article: "पुण्यात आज मुसळधार पाऊस झाला.".into(),
            reference_headline: "पुण्यात मुसळधार पाऊस".into(),
            english_reference: None,
        }
    }

    const TASK: &str = "Classify the sentiment of the Marathi tweet.";

    #[test]
    fn standard_prompt_embeds_text_and_labels() {
        let engine = PromptEngine::default();
        let spec = engine
            .build_standard_classification_prompt(&example("मी आनंदी आहे"), &sentiment(), TASK)
            .unwrap();
        assert_eq!(spec.user_text.matches("मी आनंदी आहे").count(), 1);
        assert!(spec.user_text.contains("Positive, Negative, Neutral"));
        assert_eq!(spec.expected_sections, vec![Section::Label]);
    }

    #[test]
    fn hate_prompt_lists_exactly_two_labels() {
        let labels = LabelSet::new("hate", ["Hate", "Non-hate"]).unwrap();
        let spec = PromptEngine::default()
            .build_standard_classification_prompt(&example("काहीतरी"), &labels, "Detect hate speech.")
            .unwrap();
        assert!(spec.user_text.contains("Hate, Non-hate"));
        assert!(!spec.user_text.contains("Positive"));
    }

    #[test]
    fn fence_in_text_is_escaped() {
        let text = "तो म्हणाला \"\"\" {labels} \"\"\" शेवट";
        let spec = PromptEngine::default()
            .build_standard_classification_prompt(&example(text), &sentiment(), TASK)
            .unwrap();
        let escaped = escape_text(text);
        assert_eq!(spec.user_text.matches(escaped.as_str()).count(), 1);
        // Exactly the two fence lines remain unescaped.
        assert_eq!(
            spec.user_text.lines().filter(|l| *l == TEXT_FENCE).count(),
            2
        );
        // Placeholder syntax inside the text is not expanded.
        assert!(spec.user_text.contains("{labels}"));
    }

    #[test]
    fn cotr_prompt_translates_before_classifying() {
        let engine = PromptEngine::default();
        let ex = example("मी आनंदी आहे");
        let spec = engine.build_cotr_classification_prompt(&ex, &sentiment(), TASK).unwrap();
        assert_eq!(spec.expected_sections, vec![Section::Translation, Section::Label]);
        let t = spec.user_text.find("Translation:").unwrap();
        let l = spec.user_text.find("Label:").unwrap();
        assert!(t < l);
        let again = engine.build_cotr_classification_prompt(&ex, &sentiment(), TASK).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn empty_inputs_are_validation_errors() {
        let engine = PromptEngine::default();
        assert!(matches!(
            engine.build_cotr_classification_prompt(&example("मी"), &sentiment(), "  "),
            Err(PromptError::Validation(_))
        ));
        assert!(matches!(
            engine.build_pretranslated_prompt("x", "", &sentiment(), TASK),
            Err(PromptError::Validation(_))
        ));
    }

    #[test]
    fn pretranslated_keeps_newlines_inside_block() {
        let spec = PromptEngine::default()
            .build_pretranslated_prompt("x", "I am\nvery happy today", &sentiment(), TASK)
            .unwrap();
        assert!(spec.user_text.contains("\"\"\"\nI am\nvery happy today\n\"\"\""));
        assert_eq!(spec.expected_sections, vec![Section::Label]);
        assert!(!spec.user_text.contains("Marathi text"));
    }

    #[test]
    fn generation_section_mapping() {
        let engine = PromptEngine::default();
        let direct = engine.build_generation_prompt(&article(), Strategy::Direct).unwrap();
        assert_eq!(direct.expected_sections, vec![Section::MarathiHeadline]);
        let full = engine.build_generation_prompt(&article(), Strategy::Full).unwrap();
        assert_eq!(
            full.expected_sections,
            vec![Section::EnglishArticle, Section::EnglishHeadline, Section::MarathiHeadline]
        );
        let pos: Vec<usize> = ["English Article:", "English Headline:", "Marathi Headline:"]
            .iter()
            .map(|h| full.user_text.find(h).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(
            engine.build_generation_prompt(&article(), Strategy::Standard),
            Err(PromptError::Strategy {
                strategy: Strategy::Standard,
                task: TaskKind::Generation
            })
        );
    }

    #[test]
    fn every_expected_header_appears_once() {
        let engine = PromptEngine::default();
        let ex = example("मी आनंदी आहे");
        let mut specs = vec![
            engine.build_standard_classification_prompt(&ex, &sentiment(), TASK).unwrap(),
            engine.build_cotr_classification_prompt(&ex, &sentiment(), TASK).unwrap(),
            engine.build_pretranslated_prompt("s1", "I am happy", &sentiment(), TASK).unwrap(),
        ];
        for st in [Strategy::Direct, Strategy::Half, Strategy::Full] {
            specs.push(engine.build_generation_prompt(&article(), st).unwrap());
            specs.push(engine.build_generation_first_call(&article(), st).unwrap());
        }
        specs.push(engine.build_back_translation_prompt("g1", "Heavy rain in Pune", Strategy::Half).unwrap());
        for spec in specs {
            for section in Section::ALL {
                let needle = format!("{}:", section.header());
                let n = spec.user_text.matches(&needle).count()
                    + spec.system_text.matches(&needle).count();
                let expected = usize::from(spec.expected_sections.contains(&section));
                assert_eq!(n, expected, "{needle} in {} prompt", spec.strategy);
            }
        }
    }

    #[test]
    fn template_validation() {
        let bad = [
            "no separator {text} {format}",
            "---\n{text}",
            "---\n{text} {text} {format}",
            "---\n{text} {format} {bogus}",
            "{text}\n---\n{format}",
            "---\n{text} {format} }",
        ];
        for src in bad {
            assert!(Template::parse(TemplateName::StandardClassification, src).is_err(), "{src}");
        }
        assert!(Template::parse(TemplateName::DirectGeneration, "---\n{text} {labels} {format}").is_err());
        let ok = Template::parse(TemplateName::DirectGeneration, "sys {{x}}\n---\n{text}\n{format}").unwrap();
        let mut values = BTreeMap::new();
        values.insert(Placeholder::Text, "T".to_owned());
        values.insert(Placeholder::Format, "F".to_owned());
        assert_eq!(ok.render(&values).unwrap(), ("sys {x}".to_owned(), "T\nF".to_owned()));
    }

    #[test]
    fn strategy_names_round_trip() {
        for st in Strategy::ALL {
            assert_eq!(st.name().parse::<Strategy>().unwrap(), st);
        }
        assert!("cot".parse::<Strategy>().is_err());
    }
}
