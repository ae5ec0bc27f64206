//! The (K, W) datastore: context embeddings paired with the token that
//! followed them, harvested with one forward pass over training dialogs.
//!
//! File layout (`RDKV`, little-endian):
//!
//! ```text
//! magic "RDKV" | version u32 | dim u32 | count u64 | key dtype u8 (0 = f32)
//! | checkpoint sha256 [32] | corpus sha256 [32] | filter u8
//! | count × dim f32 keys | count u32 values
//! ```

use std::path::Path;

use crate::binio::{self, Hash, Reader, Writer};
use crate::corpus::{corpus_hash, EncodedDialog, Role, TokenId};
use crate::error::{Error, Result};
use crate::lm::ContextModel;

pub const MAGIC: &[u8; 4] = b"RDKV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 1 + 32 + 32 + 1;
const DTYPE_F32: u8 = 0;

/// Which target tokens produce entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterMode {
    /// Only targets tagged Assistant (turn markers and metadata included,
    /// end-of-chat excluded).
    #[default]
    AssistantOnly,
    All,
    /// Keep entries whose context's last token is Assistant-tagged.
    AssistantContext,
}

impl FilterMode {
    fn tag(self) -> u8 {
        match self {
            FilterMode::AssistantOnly => 0,
            FilterMode::All => 1,
            FilterMode::AssistantContext => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => FilterMode::AssistantOnly,
            1 => FilterMode::All,
            2 => FilterMode::AssistantContext,
            other => return Err(Error::format("datastore", format!("unknown filter tag {other}"))),
        })
    }

    fn keeps(self, context_role: Role, target_role: Role) -> bool {
        match self {
            FilterMode::AssistantOnly => target_role == Role::Assistant,
            FilterMode::All => true,
            FilterMode::AssistantContext => context_role == Role::Assistant,
        }
    }
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assistant_only" | "assistant-only" => Ok(FilterMode::AssistantOnly),
            "all" => Ok(FilterMode::All),
            "assistant_context" | "assistant-context" => Ok(FilterMode::AssistantContext),
            other => Err(Error::Config(format!("unknown filter mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub checkpoint: Hash,
    pub corpus: Hash,
    pub filter: FilterMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatastoreEntry<'a> {
    pub key: &'a [f32],
    pub value: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<TokenId>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildOptions {
    pub filter: FilterMode,
    /// Use only the last N dialogs.
    pub take_last: Option<usize>,
}

impl Datastore {
    pub fn empty(dim: usize, provenance: Provenance) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
            provenance,
        }
    }

    pub fn from_parts(dim: usize, keys: Vec<f32>, values: Vec<TokenId>, provenance: Provenance) -> Result<Self> {
        if dim == 0 || keys.len() != values.len() * dim {
            return Err(Error::Validation(format!(
                "{} key floats do not hold {} keys of dim {dim}",
                keys.len(),
                values.len()
            )));
        }
        Ok(Self {
            dim,
            keys,
            values,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize) -> TokenId {
        self.values[i]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[TokenId] {
        &self.values
    }

    pub fn entries(&self) -> impl Iterator<Item = DatastoreEntry<'_>> {
        self.keys
            .chunks_exact(self.dim)
            .zip(&self.values)
            .map(|(key, &value)| DatastoreEntry { key, value })
    }

    pub fn push(&mut self, key: &[f32], value: TokenId) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: key.len(),
            });
        }
        self.keys.extend_from_slice(key);
        self.values.push(value);
        Ok(())
    }

    /// Runs the model once over each dialog from a fresh state and appends
    /// the entries retained by `filter`, in dialog then position order.
    pub fn extend_from<M: ContextModel>(
        &mut self,
        model: &M,
        dialogs: &[EncodedDialog],
        filter: FilterMode,
    ) -> Result<()> {
        if model.embedding_dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: model.embedding_dim(),
            });
        }
        for d in dialogs {
            let mut state = model.reset_state();
            let out = model.forward(&d.tokens, &mut state)?;
            for t in 1..d.tokens.len() {
                if filter.keeps(d.roles[t - 1], d.roles[t]) {
                    self.push(out.embeddings[t - 1].as_slice(), d.tokens[t])?;
                }
            }
        }
        Ok(())
    }

    /// Content hash over header fields, keys and values.
    pub fn hash(&self) -> Hash {
        binio::sha256(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.reserve(HEADER_LEN + self.len() * (4 * self.dim + 4));
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.dim as u32);
        w.u64(self.len() as u64);
        w.u8(DTYPE_F32);
        w.bytes(&self.provenance.checkpoint);
        w.bytes(&self.provenance.corpus);
        w.u8(self.provenance.filter.tag());
        for &k in &self.keys {
            w.f32(k);
        }
        for &v in &self.values {
            w.u32(v);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "datastore");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::format("datastore", format!("unsupported key dtype {dtype}")));
        }
        let checkpoint = r.hash()?;
        let corpus = r.hash()?;
        let filter = FilterMode::from_tag(r.u8()?)?;
        let need = count
            .checked_mul(4 * dim + 4)
            .ok_or_else(|| Error::format("datastore", "count overflows"))?;
        if r.remaining() != need {
            return Err(Error::format(
                "datastore",
                format!("expected {need} payload bytes, found {}", r.remaining()),
            ));
        }
        let keys = r.f32_vec(count * dim)?;
        let values = r.u32_vec(count)?;
        Self::from_parts(
            dim,
            keys,
            values,
            Provenance {
                checkpoint,
                corpus,
                filter,
            },
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path, "datastore")?)
    }
}

/// Builds a datastore from `dialogs` with one forward pass per dialog.
/// `checkpoint` is the hash of the model the keys come from.
pub fn build<M: ContextModel>(
    model: &M,
    checkpoint: Hash,
    dialogs: &[EncodedDialog],
    opts: BuildOptions,
) -> Result<Datastore> {
    let dialogs = match opts.take_last {
        Some(n) => &dialogs[dialogs.len().saturating_sub(n)..],
        None => dialogs,
    };
    let mut ds = Datastore::empty(
        model.embedding_dim(),
        Provenance {
            checkpoint,
            corpus: corpus_hash(dialogs),
            filter: opts.filter,
        },
    );
    ds.extend_from(model, dialogs, opts.filter)?;
    Ok(ds)
}
