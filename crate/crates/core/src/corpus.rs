//! Dialog corpora: JSONL ingestion, the word-level vocabulary, flat token
//! encoding with role tags, and deterministic train/dev/test splitting.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Hash};
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Reserved ids. Specials always occupy ids `0..NUM_SPECIALS` in this order.
pub mod special {
    use super::TokenId;

    pub const PAD: TokenId = 0;
    pub const UNK: TokenId = 1;
    pub const BOT_USER: TokenId = 2;
    pub const BOT_ASST: TokenId = 3;
    pub const EOT: TokenId = 4;
    pub const EOC: TokenId = 5;

    pub const NAMES: [&str; 6] = ["<pad>", "<unk>", "<user>", "<assistant>", "<eot>", "<eoc>"];
}

pub const NUM_SPECIALS: usize = special::NAMES.len();

/// Turn numbers at or above this value share the cap token.
pub const MAX_TURN_TOKEN: usize = 63;

pub fn turn_token(turn_number: usize) -> String {
    format!("<turn:{}>", turn_number.min(MAX_TURN_TOKEN))
}

pub fn agent_token(agent_id: &str) -> String {
    let cleaned: String = agent_id
        .trim()
        .chars()
        .map(|c| if c.is_whitespace() { '_' } else { c })
        .collect();
    format!("<agent:{cleaned}>")
}

/// Lowercased whitespace tokenization.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Assistant,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::User => f.write_str("user"),
            Speaker::Assistant => f.write_str("assistant"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub turn_number: usize,
    pub agent_id: Option<String>,
}

impl Turn {
    pub fn words(&self) -> Vec<String> {
        normalize(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialog {
    /// Builds a dialog from `(speaker, text, agent_id)` triples, numbering
    /// turns by position. Does not validate.
    pub fn from_turns<S: Into<String>>(
        id: impl Into<String>,
        turns: impl IntoIterator<Item = (Speaker, S, Option<String>)>,
    ) -> Self {
        let turns = turns
            .into_iter()
            .enumerate()
            .map(|(i, (speaker, text, agent_id))| Turn {
                speaker,
                text: text.into(),
                turn_number: i,
                agent_id,
            })
            .collect();
        Dialog { id: id.into(), turns }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with_min_turns(2)
    }

    fn validate_with_min_turns(&self, min_turns: usize) -> Result<()> {
        if self.turns.len() < min_turns {
            return Err(Error::Validation(format!(
                "dialog {} has {} turn(s), need at least {min_turns}",
                self.id,
                self.turns.len()
            )));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.turn_number != i {
                return Err(Error::Validation(format!(
                    "dialog {}: turn {} has turn_number {}",
                    self.id, i, t.turn_number
                )));
            }
            if t.words().is_empty() {
                return Err(Error::Validation(format!(
                    "dialog {}: turn {} has empty text",
                    self.id, i
                )));
            }
            if t.agent_id.is_some() && t.speaker == Speaker::User {
                return Err(Error::Validation(format!(
                    "dialog {}: user turn {} carries an agent_id",
                    self.id, i
                )));
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        let raw = RawDialog {
            id: self.id.clone(),
            turns: self
                .turns
                .iter()
                .map(|t| RawTurn {
                    speaker: t.speaker.to_string(),
                    text: t.text.clone(),
                    agent_id: t.agent_id.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("dialog serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct RawTurn {
    speaker: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    agent_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawDialog {
    id: String,
    turns: Vec<RawTurn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    Jsonl,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Dialog>> {
    match format {
        CorpusFormat::Jsonl => {
            if !path.exists() {
                return Err(Error::not_found("corpus", path));
            }
            let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            parse_jsonl(BufReader::new(f))
        }
    }
}

/// Parses a JSONL corpus. Blank lines are skipped; line numbers in errors are
/// 1-based.
pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<Dialog>> {
    parse_jsonl_min_turns(reader, 2)
}

/// Reads generation prefixes: same format as a corpus, but a dialog may
/// consist of a single turn.
pub fn load_prefixes(path: &Path) -> Result<Vec<Dialog>> {
    if !path.exists() {
        return Err(Error::not_found("prefix file", path));
    }
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_prefixes(BufReader::new(f))
}

/// Prefix lines from any reader.
pub fn parse_prefixes<R: BufRead>(reader: R) -> Result<Vec<Dialog>> {
    parse_jsonl_min_turns(reader, 1)
}

fn parse_jsonl_min_turns<R: BufRead>(reader: R, min_turns: usize) -> Result<Vec<Dialog>> {
    let mut dialogs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDialog = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let mut turns = Vec::with_capacity(raw.turns.len());
        for (i, t) in raw.turns.into_iter().enumerate() {
            let speaker = match t.speaker.as_str() {
                "user" => Speaker::User,
                "assistant" => Speaker::Assistant,
                other => {
                    return Err(Error::Validation(format!(
                        "line {lineno}: unknown speaker {other:?}"
                    )))
                }
            };
            turns.push(Turn {
                speaker,
                text: t.text,
                turn_number: i,
                agent_id: t.agent_id,
            });
        }
        let dialog = Dialog { id: raw.id, turns };
        dialog
            .validate_with_min_turns(min_turns)
            .map_err(|e| Error::Validation(format!("line {lineno}: {e}")))?;
        dialogs.push(dialog);
    }
    Ok(dialogs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    /// Ids below this are specials or metadata tokens and never match content words.
    reserved: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_count: usize,
    /// Reserve turn-number and agent-id tokens.
    pub metadata: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            max_size: 16_000,
            min_count: 1,
            metadata: false,
        }
    }
}

/// Word-only vocabulary: specials followed by the most frequent words.
pub fn build_vocabulary(dialogs: &[Dialog], max_size: usize, min_count: usize) -> Result<Vocabulary> {
    build_vocabulary_with(
        dialogs,
        &VocabConfig {
            max_size,
            min_count,
            metadata: false,
        },
    )
}

pub fn build_vocabulary_with(dialogs: &[Dialog], cfg: &VocabConfig) -> Result<Vocabulary> {
    if dialogs.is_empty() {
        return Err(Error::Validation("cannot build a vocabulary from no dialogs".into()));
    }
    if cfg.max_size < NUM_SPECIALS {
        return Err(Error::Config(format!(
            "max_size {} is smaller than the {} special tokens",
            cfg.max_size, NUM_SPECIALS
        )));
    }
    if cfg.min_count == 0 {
        return Err(Error::Config("min_count must be positive".into()));
    }

    let mut tokens: Vec<String> = special::NAMES.iter().map(|s| s.to_string()).collect();
    if cfg.metadata {
        tokens.extend((0..=MAX_TURN_TOKEN).map(turn_token));
        let mut agents: Vec<String> = dialogs
            .iter()
            .flat_map(|d| d.turns.iter())
            .filter_map(|t| t.agent_id.as_deref().map(agent_token))
            .collect();
        agents.sort();
        agents.dedup();
        tokens.extend(agents);
        if tokens.len() > cfg.max_size {
            return Err(Error::Config(format!(
                "max_size {} cannot hold the {} special and metadata tokens",
                cfg.max_size,
                tokens.len()
            )));
        }
    }
    let reserved = tokens.len();

    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in dialogs {
        for t in &d.turns {
            for w in t.words() {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= cfg.min_count && !tokens.contains(w))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = cfg.max_size - reserved;
    tokens.extend(ranked.into_iter().take(room).map(|(w, _)| w));

    Vocabulary::from_tokens_with_reserved(tokens, reserved)
}

impl Vocabulary {
    fn from_tokens_with_reserved(id_to_token: Vec<String>, reserved: usize) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid vocabulary token {t:?} at id {i}")));
            }
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
            reserved,
        })
    }

    /// Rebuilds a vocabulary from its id-ordered token list. The list must
    /// start with the special tokens.
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < NUM_SPECIALS
            || id_to_token[..NUM_SPECIALS]
                .iter()
                .zip(special::NAMES)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Validation(
                "vocabulary must begin with the special tokens".into(),
            ));
        }
        let reserved = NUM_SPECIALS
            + id_to_token[NUM_SPECIALS..]
                .iter()
                .take_while(|t| t.starts_with("<turn:") || t.starts_with("<agent:"))
                .count();
        Self::from_tokens_with_reserved(id_to_token, reserved)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Id for a content word; reserved tokens and OOV words map to UNK.
    pub fn word_id(&self, word: &str) -> TokenId {
        match self.id(word) {
            Some(id) if id as usize >= self.reserved => id,
            _ => special::UNK,
        }
    }

    /// True for specials and metadata tokens.
    pub fn is_reserved(&self, id: TokenId) -> bool {
        (id as usize) < self.reserved
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect()
    }

    /// One token per line, line index = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path, "vocabulary")?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::format("vocabulary", e.to_string()))?;
        Self::from_text(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    User,
    Assistant,
    Boundary,
}

impl From<Speaker> for Role {
    fn from(s: Speaker) -> Self {
        match s {
            Speaker::User => Role::User,
            Speaker::Assistant => Role::Assistant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDialog {
    pub dialog_id: String,
    pub tokens: Vec<TokenId>,
    pub roles: Vec<Role>,
}

/// Token range of one encoded turn, from its begin marker through its EOT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TurnSpan {
    pub speaker: Speaker,
    pub start: usize,
    pub end: usize,
}

pub fn encode_dialog(d: &Dialog, v: &Vocabulary, with_metadata: bool) -> EncodedDialog {
    let mut tokens = Vec::new();
    let mut roles = Vec::new();
    for turn in &d.turns {
        let role = Role::from(turn.speaker);
        let mut push = |id: TokenId| {
            tokens.push(id);
            roles.push(role);
        };
        push(match turn.speaker {
            Speaker::User => special::BOT_USER,
            Speaker::Assistant => special::BOT_ASST,
        });
        if with_metadata && turn.speaker == Speaker::Assistant {
            push(v.id(&turn_token(turn.turn_number)).unwrap_or(special::UNK));
            let agent = turn
                .agent_id
                .as_deref()
                .and_then(|a| v.id(&agent_token(a)))
                .unwrap_or(special::UNK);
            push(agent);
        }
        for w in turn.words() {
            push(v.word_id(&w));
        }
        push(special::EOT);
    }
    tokens.push(special::EOC);
    roles.push(Role::Boundary);
    EncodedDialog {
        dialog_id: d.id.clone(),
        tokens,
        roles,
    }
}

impl EncodedDialog {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn turn_spans(&self) -> Vec<TurnSpan> {
        let mut spans = Vec::new();
        let mut open: Option<(Speaker, usize)> = None;
        for (i, &t) in self.tokens.iter().enumerate() {
            match t {
                special::BOT_USER => open = Some((Speaker::User, i)),
                special::BOT_ASST => open = Some((Speaker::Assistant, i)),
                special::EOT => {
                    if let Some((speaker, start)) = open.take() {
                        spans.push(TurnSpan {
                            speaker,
                            start,
                            end: i + 1,
                        });
                    }
                }
                _ => {}
            }
        }
        spans
    }
}

/// Content hash over encoded dialogs, used for provenance.
pub fn corpus_hash(dialogs: &[EncodedDialog]) -> Hash {
    let mut w = binio::Writer::new();
    w.u64(dialogs.len() as u64);
    for d in dialogs {
        w.u64(d.dialog_id.len() as u64);
        w.bytes(d.dialog_id.as_bytes());
        w.u64(d.tokens.len() as u64);
        for (&t, &r) in d.tokens.iter().zip(&d.roles) {
            w.u32(t);
            w.u8(r as u8);
        }
    }
    binio::sha256(&w.buf)
}

pub fn split_corpus(
    dialogs: &[Dialog],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Dialog>, Vec<Dialog>, Vec<Dialog>)> {
    let (tr, dv, te) = ratios;
    if !(tr > 0.0 && dv > 0.0 && te > 0.0) || ((tr + dv + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios ({tr}, {dv}, {te}) must be positive and sum to 1"
        )));
    }
    let n = dialogs.len();
    if n < 3 {
        return Err(Error::Validation(format!(
            "cannot split {n} dialog(s) into 3 non-empty parts"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_dev = ((n as f64 * dv).round() as usize).max(1);
    let n_test = ((n as f64 * te).round() as usize).max(1);
    let n_train = n.saturating_sub(n_dev + n_test).max(1);
    let n_dev = n_dev.min(n - n_train - 1);

    let pick = |range: std::ops::Range<usize>| -> Vec<Dialog> {
        order[range].iter().map(|&i| dialogs[i].clone()).collect()
    };
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_dev),
        pick(n_train + n_dev..n),
    ))
}

/// Unique whitespace/lowercase token count over a corpus.
pub fn unique_token_count(dialogs: &[Dialog]) -> usize {
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    for d in dialogs {
        for t in &d.turns {
            for w in t.words() {
                seen.insert(w, ());
            }
        }
    }
    seen.len()
}

pub fn average_turns_per_dialog(dialogs: &[Dialog]) -> f64 {
    if dialogs.is_empty() {
        return 0.0;
    }
    dialogs.iter().map(|d| d.turns.len()).sum::<usize>() as f64 / dialogs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dlg(id: &str, turns: &[(Speaker, &str)]) -> Dialog {
        Dialog::from_turns(id, turns.iter().map(|&(s, t)| (s, t, None)))
    }

    #[test]
    fn parses_example_line() {
        let line = r#"{"id":"d1","turns":[{"speaker":"user","text":"hi"},{"speaker":"assistant","text":"hello","agent_id":"a@co"}]}"#;
        let ds = parse_jsonl(line.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].turns.len(), 2);
        assert_eq!(ds[0].turns[0].turn_number, 0);
        assert_eq!(ds[0].turns[1].turn_number, 1);
        assert_eq!(ds[0].turns[1].agent_id.as_deref(), Some("a@co"));
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(parse_jsonl(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"turns\":[{\"speaker\":\"user\",\"text\":\"x\"},{\"speaker\":\"assistant\",\"text\":\"y\"}]}\n{oops\n";
        match parse_jsonl(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_speaker_is_validation_error() {
        let text = r#"{"id":"a","turns":[{"speaker":"bot","text":"x"},{"speaker":"user","text":"y"}]}"#;
        assert!(matches!(parse_jsonl(text.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn blank_text_and_short_dialogs_rejected() {
        let short = r#"{"id":"a","turns":[{"speaker":"user","text":"x"}]}"#;
        assert!(matches!(parse_jsonl(short.as_bytes()), Err(Error::Validation(_))));
        let blank = r#"{"id":"a","turns":[{"speaker":"user","text":"  "},{"speaker":"assistant","text":"y"}]}"#;
        assert!(matches!(parse_jsonl(blank.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn vocabulary_frequency_cap_and_threshold() {
        let d = vec![dlg(
            "a",
            &[(Speaker::User, "hi hi"), (Speaker::Assistant, "hi hello")],
        )];
        let v = build_vocabulary(&d, 7, 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(6), Some("hi"));
        assert_eq!(v.id("hello"), None);

        let v = build_vocabulary(&d, 100, 2).unwrap();
        assert_eq!(v.id("hi"), Some(6));
        assert_eq!(v.id("hello"), None);

        let v = build_vocabulary(&d, 100, 1).unwrap();
        assert_eq!(v.id("hello"), Some(7));
    }

    #[test]
    fn vocabulary_ties_break_lexicographically() {
        let d = vec![dlg("a", &[(Speaker::User, "b a"), (Speaker::Assistant, "c")])];
        let v = build_vocabulary(&d, 100, 1).unwrap();
        assert_eq!(&v.tokens()[NUM_SPECIALS..], &["a", "b", "c"]);
    }

    #[test]
    fn vocabulary_too_small_is_config_error() {
        let d = vec![dlg("a", &[(Speaker::User, "x"), (Speaker::Assistant, "y")])];
        assert!(matches!(build_vocabulary(&d, 5, 1), Err(Error::Config(_))));
        assert!(matches!(build_vocabulary(&[], 50, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let mut d = dlg("a", &[(Speaker::User, "hi there"), (Speaker::Assistant, "hello")]);
        d.turns[1].agent_id = Some("a@co".into());
        let v = build_vocabulary_with(
            &[d],
            &VocabConfig {
                max_size: 1000,
                min_count: 1,
                metadata: true,
            },
        )
        .unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("hello\n").is_err());
    }

    #[test]
    fn encodes_single_user_turn() {
        let d = Dialog::from_turns("x", [(Speaker::User, "hi", None)]);
        let v = build_vocabulary(std::slice::from_ref(&d), 100, 1).unwrap();
        let e = encode_dialog(&d, &v, false);
        assert_eq!(
            e.tokens,
            vec![special::BOT_USER, v.id("hi").unwrap(), special::EOT, special::EOC]
        );
        assert_eq!(e.roles, vec![Role::User, Role::User, Role::User, Role::Boundary]);
    }

    #[test]
    fn encodes_metadata_before_content() {
        let d = Dialog::from_turns(
            "x",
            [
                (Speaker::User, "hi", None),
                (Speaker::Assistant, "hello", Some("a@co".to_string())),
            ],
        );
        let v = build_vocabulary_with(
            std::slice::from_ref(&d),
            &VocabConfig {
                max_size: 1000,
                min_count: 1,
                metadata: true,
            },
        )
        .unwrap();
        let e = encode_dialog(&d, &v, true);
        let words = v.decode(&e.tokens[3..]);
        assert_eq!(words, vec!["<assistant>", "<turn:1>", "<agent:a@co>", "hello", "<eot>", "<eoc>"]);
        assert_eq!(e.roles[3..7], [Role::Assistant; 4]);
        assert!(v.is_reserved(e.tokens[4]) && v.is_reserved(e.tokens[5]));
    }

    #[test]
    fn turn_numbers_cap() {
        assert_eq!(turn_token(5), "<turn:5>");
        assert_eq!(turn_token(63), "<turn:63>");
        assert_eq!(turn_token(400), "<turn:63>");
    }

    #[test]
    fn oov_maps_to_unk() {
        let d = dlg("a", &[(Speaker::User, "hi"), (Speaker::Assistant, "yo")]);
        let v = build_vocabulary(&[d], 100, 1).unwrap();
        let q = dlg("b", &[(Speaker::User, "hi zzz"), (Speaker::Assistant, "yo")]);
        let e = encode_dialog(&q, &v, false);
        assert_eq!(e.tokens[2], special::UNK);
    }

    #[test]
    fn content_words_never_hit_reserved_ids() {
        let d = dlg("a", &[(Speaker::User, "<eot> x"), (Speaker::Assistant, "y")]);
        let v = build_vocabulary(std::slice::from_ref(&d), 100, 1).unwrap();
        let e = encode_dialog(&d, &v, false);
        assert_eq!(e.tokens[1], special::UNK);
    }

    #[test]
    fn turn_spans_cover_turns() {
        let d = dlg(
            "a",
            &[(Speaker::User, "a b"), (Speaker::Assistant, "c"), (Speaker::User, "d")],
        );
        let v = build_vocabulary(std::slice::from_ref(&d), 100, 1).unwrap();
        let e = encode_dialog(&d, &v, false);
        let spans = e.turn_spans();
        assert_eq!(spans.len(), 3);
        assert_eq!((spans[0].start, spans[0].end), (0, 4));
        assert_eq!((spans[1].start, spans[1].end), (4, 7));
        assert_eq!(spans[1].speaker, Speaker::Assistant);
        assert_eq!((spans[2].start, spans[2].end), (7, 10));
    }

    fn ten() -> Vec<Dialog> {
        (0..10)
            .map(|i| dlg(&format!("d{i}"), &[(Speaker::User, "a"), (Speaker::Assistant, "b")]))
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = ten();
        let (a, b, c) = split_corpus(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let again = split_corpus(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a, b, c), again);
    }

    #[test]
    fn split_seeds_permute_same_union() {
        let ds = ten();
        let ids = |s: (Vec<Dialog>, Vec<Dialog>, Vec<Dialog>)| {
            let mut v: Vec<String> = s.0.into_iter().chain(s.1).chain(s.2).map(|d| d.id).collect();
            v.sort();
            v
        };
        let s1 = split_corpus(&ds, (0.8, 0.1, 0.1), 1).unwrap();
        let s2 = split_corpus(&ds, (0.8, 0.1, 0.1), 2).unwrap();
        assert_ne!(s1.0, s2.0);
        assert_eq!(ids(s1), ids(s2));
    }

    #[test]
    fn split_rejects_bad_input() {
        let ds = ten();
        assert!(split_corpus(&ds, (0.5, 0.2, 0.2), 0).is_err());
        assert!(split_corpus(&ds, (0.0, 0.5, 0.5), 0).is_err());
        assert!(split_corpus(&ds[..2], (0.8, 0.1, 0.1), 0).is_err());
        let (a, b, c) = split_corpus(&ds[..3], (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1, 1, 1));
    }
}
