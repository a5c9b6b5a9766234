//! C interface: Symmetric Correlation attention, contribution index,
//! support pruning and feature-file I/O.
//!
//! Objects are opaque handles created by `*_new`/`*_read` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`SymcorrStatus`]; on failure a description is available from
//! [`symcorr_last_error_message`] on the same thread. Matrices are dense
//! row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use symcorr::correlation::{
    contribution_index, deviation, symmetric_attention, Affine, AttentionMap, ScProjector,
    ScaleMode, SupportPack, TokenMatrix,
};
use symcorr::lab::fts::{read_features, write_features};
use symcorr::pruning::{greedy_select, score_table, topk_select};
use symcorr::segmenter::LayerStack;
use symcorr::tensor::Matrix;
use symcorr::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymcorrStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Contract = 3,
    Format = 4,
    Config = 5,
    Io = 6,
    Evaluation = 7,
    NonFinite = 8,
    DegenerateRow = 9,
    InvalidUtf8 = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymcorrScale {
    /// Divide logits by the square root of the feature dim.
    SqrtD = 0,
    /// Divide logits by the feature dim.
    D = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymcorrPruneAlgorithm {
    Greedy = 0,
    TopK = 1,
}

/// Shared magnitude/direction projector.
pub struct SymcorrProjector {
    inner: ScProjector,
}

/// Attention of query tokens over concatenated support tokens.
pub struct SymcorrAttention {
    inner: AttentionMap,
}

/// Per-layer token matrices of one image.
pub struct SymcorrLayerStack {
    inner: LayerStack,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(SymcorrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } | Error::Size { .. } => SymcorrStatus::Shape,
            Error::DegenerateRow { .. } => SymcorrStatus::DegenerateRow,
            Error::NonFinite(_) => SymcorrStatus::NonFinite,
            Error::Contract(_) => SymcorrStatus::Contract,
            Error::Config(_) => SymcorrStatus::Config,
            Error::Format { .. } => SymcorrStatus::Format,
            Error::Evaluation(_) => SymcorrStatus::Evaluation,
            Error::Io(_) => SymcorrStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Outcome<()>) -> SymcorrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SymcorrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            SymcorrStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SymcorrStatus::NullPointer, format!("{what} is null"))
}

fn contract(msg: String) -> Failure {
    Failure(SymcorrStatus::Contract, msg)
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Outcome<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Outcome<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Outcome<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Outcome<()> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn path<'a>(p: *const c_char) -> Outcome<&'a Path> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure(SymcorrStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Outcome<Matrix> {
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| contract(format!("{what}: {rows}x{cols} overflows")))?;
    Ok(Matrix::new(rows, cols, slice(p, n, what)?.to_vec())?)
}

/// Query tokens and a support pack from flat arrays.
unsafe fn episode_tokens(
    query: *const f64,
    query_tokens: usize,
    supports: *const f64,
    support_tokens: *const usize,
    n_supports: usize,
    dim: usize,
) -> Outcome<(TokenMatrix, SupportPack)> {
    let xq = TokenMatrix::new(matrix(query, query_tokens, dim, "query")?)?;
    let counts = slice(support_tokens, n_supports, "support_tokens")?;
    let total = counts
        .iter()
        .try_fold(0usize, |acc, &n| acc.checked_add(n))
        .ok_or_else(|| contract("support token counts overflow".into()))?;
    let all = matrix(supports, total, dim, "supports")?;
    let mut head = 0;
    let items = counts
        .iter()
        .map(|&n| {
            let m = all.slice_rows(head, head + n)?;
            head += n;
            TokenMatrix::new(m)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((xq, SupportPack::new(items)?))
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn symcorr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Projector `f(x) = (x·W1 + b1) ⊙ unit(x·W2 + b2)`; weights are `dim x dim`,
/// biases `dim`.
///
/// # Safety
/// Array arguments must point to the stated number of doubles; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn symcorr_projector_new(
    dim: usize,
    f1_weight: *const f64,
    f1_bias: *const f64,
    f2_weight: *const f64,
    f2_bias: *const f64,
    out: *mut *mut SymcorrProjector,
) -> SymcorrStatus {
    guard(|| {
        let f1 = Affine::new(
            matrix(f1_weight, dim, dim, "f1_weight")?,
            matrix(f1_bias, 1, dim, "f1_bias")?,
        )?;
        let f2 = Affine::new(
            matrix(f2_weight, dim, dim, "f2_weight")?,
            matrix(f2_bias, 1, dim, "f2_bias")?,
        )?;
        let p = ScProjector::new(f1, f2)?;
        put(
            out,
            Box::into_raw(Box::new(SymcorrProjector { inner: p })),
            "out",
        )
    })
}

/// Projector whose magnitude branch is the given map and whose direction
/// branch has zero weights and unit biases.
///
/// # Safety
/// As for [`symcorr_projector_new`].
#[no_mangle]
pub unsafe extern "C" fn symcorr_projector_warm_start(
    dim: usize,
    weight: *const f64,
    bias: *const f64,
    out: *mut *mut SymcorrProjector,
) -> SymcorrStatus {
    guard(|| {
        let f1 = Affine::new(
            matrix(weight, dim, dim, "weight")?,
            matrix(bias, 1, dim, "bias")?,
        )?;
        let p = ScProjector::from_query_projection(f1)?;
        put(
            out,
            Box::into_raw(Box::new(SymcorrProjector { inner: p })),
            "out",
        )
    })
}

/// # Safety
/// `p` must come from a projector constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn symcorr_projector_free(p: *mut SymcorrProjector) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Symmetric Correlation attention of `query` (`query_tokens x dim`) over
/// the supports stacked in `supports`; support `i` has `support_tokens[i]`
/// rows.
///
/// # Safety
/// Pointers must be valid for the stated sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn symcorr_symmetric_attention(
    projector: *const SymcorrProjector,
    query: *const f64,
    query_tokens: usize,
    supports: *const f64,
    support_tokens: *const usize,
    n_supports: usize,
    dim: usize,
    scale: SymcorrScale,
    out: *mut *mut SymcorrAttention,
) -> SymcorrStatus {
    guard(|| {
        let p = get(projector, "projector")?;
        let (xq, pack) = episode_tokens(
            query,
            query_tokens,
            supports,
            support_tokens,
            n_supports,
            dim,
        )?;
        let scale = match scale {
            SymcorrScale::SqrtD => ScaleMode::SqrtD,
            SymcorrScale::D => ScaleMode::D,
        };
        let a = symmetric_attention(&pack, &xq, &p.inner, scale)?;
        put(
            out,
            Box::into_raw(Box::new(SymcorrAttention { inner: a })),
            "out",
        )
    })
}

/// # Safety
/// `a` must be a live attention handle; `rows` and `cols` writable.
#[no_mangle]
pub unsafe extern "C" fn symcorr_attention_shape(
    a: *const SymcorrAttention,
    rows: *mut usize,
    cols: *mut usize,
) -> SymcorrStatus {
    guard(|| {
        let (r, c) = get(a, "attention")?.inner.values().shape();
        put(rows, r, "rows")?;
        put(cols, c, "cols")
    })
}

/// Copies the attention weights; `len` must equal rows × cols.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn symcorr_attention_values(
    a: *const SymcorrAttention,
    out: *mut f64,
    len: usize,
) -> SymcorrStatus {
    guard(|| {
        let v = get(a, "attention")?.inner.values();
        if len != v.data().len() {
            return Err(contract(format!(
                "buffer holds {len} values, attention has {}",
                v.data().len()
            )));
        }
        slice_mut(out, len, "out")?.copy_from_slice(v.data());
        Ok(())
    })
}

/// # Safety
/// `a` must come from an attention constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn symcorr_attention_free(a: *mut SymcorrAttention) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// Contribution index of every support; `len` must equal the number of
/// supports.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn symcorr_contribution_index(
    a: *const SymcorrAttention,
    out: *mut f64,
    len: usize,
) -> SymcorrStatus {
    guard(|| {
        let report = contribution_index(&get(a, "attention")?.inner)?;
        if len != report.per_support_delta.len() {
            return Err(contract(format!(
                "buffer holds {len} values, there are {} supports",
                report.per_support_delta.len()
            )));
        }
        slice_mut(out, len, "out")?.copy_from_slice(&report.per_support_delta);
        Ok(())
    })
}

/// Contribution of support `designated` minus the mean of the others.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn symcorr_deviation(
    a: *const SymcorrAttention,
    designated: usize,
    out: *mut f64,
) -> SymcorrStatus {
    guard(|| {
        let report = contribution_index(&get(a, "attention")?.inner)?;
        put(out, deviation(&report, designated)?, "out")
    })
}

/// Pruning score of every support: projected mean support token dotted
/// with the projected mean query token.
///
/// # Safety
/// Same layout as [`symcorr_symmetric_attention`]; `terms` holds
/// `n_supports` doubles.
#[no_mangle]
pub unsafe extern "C" fn symcorr_prune_terms(
    projector: *const SymcorrProjector,
    query: *const f64,
    query_tokens: usize,
    supports: *const f64,
    support_tokens: *const usize,
    n_supports: usize,
    dim: usize,
    terms: *mut f64,
) -> SymcorrStatus {
    guard(|| {
        let p = get(projector, "projector")?;
        let (xq, pack) = episode_tokens(
            query,
            query_tokens,
            supports,
            support_tokens,
            n_supports,
            dim,
        )?;
        let table = score_table(pack.items(), &xq, std::slice::from_ref(&p.inner))?;
        slice_mut(terms, n_supports, "terms")?.copy_from_slice(&table.terms);
        Ok(())
    })
}

/// Selects `n_prime` of `n` supports by their terms. `selected` receives
/// indices in selection order.
///
/// # Safety
/// `terms` holds `n` doubles, `selected` holds `n_prime` entries,
/// `objective` and `evaluations` are writable.
#[no_mangle]
pub unsafe extern "C" fn symcorr_prune_select(
    terms: *const f64,
    n: usize,
    n_prime: usize,
    algorithm: SymcorrPruneAlgorithm,
    selected: *mut usize,
    objective: *mut f64,
    evaluations: *mut usize,
) -> SymcorrStatus {
    guard(|| {
        let terms = slice(terms, n, "terms")?;
        let r = match algorithm {
            SymcorrPruneAlgorithm::Greedy => greedy_select(terms, n_prime)?,
            SymcorrPruneAlgorithm::TopK => topk_select(terms, n_prime)?,
        };
        slice_mut(selected, n_prime, "selected")?.copy_from_slice(&r.selected);
        put(objective, r.objective, "objective")?;
        put(evaluations, r.evaluations, "evaluations")
    })
}

/// Stack of `n_layers` layers sharing `dim` columns; layer `l` has
/// `rows[l]` tokens, a perfect square. `data` holds the layers one after
/// another.
///
/// # Safety
/// `rows` holds `n_layers` entries and `data` the sum of `rows[l] * dim`
/// doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn symcorr_layer_stack_new(
    n_layers: usize,
    rows: *const usize,
    dim: usize,
    data: *const f64,
    out: *mut *mut SymcorrLayerStack,
) -> SymcorrStatus {
    guard(|| {
        let rows = slice(rows, n_layers, "rows")?;
        let total = rows
            .iter()
            .try_fold(0usize, |acc, &r| acc.checked_add(r.checked_mul(dim)?))
            .ok_or_else(|| contract("layer sizes overflow".into()))?;
        let data = slice(data, total, "data")?;
        let mut head = 0;
        let layers = rows
            .iter()
            .map(|&r| {
                let part = data[head..head + r * dim].to_vec();
                head += r * dim;
                TokenMatrix::new(Matrix::new(r, dim, part)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let stack = LayerStack::new(layers)?;
        put(
            out,
            Box::into_raw(Box::new(SymcorrLayerStack { inner: stack })),
            "out",
        )
    })
}

/// Reads an `FTS1` feature file.
///
/// # Safety
/// `file` must be a NUL-terminated UTF-8 path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn symcorr_layer_stack_read(
    file: *const c_char,
    out: *mut *mut SymcorrLayerStack,
) -> SymcorrStatus {
    guard(|| {
        let stack = read_features(path(file)?)?;
        put(
            out,
            Box::into_raw(Box::new(SymcorrLayerStack { inner: stack })),
            "out",
        )
    })
}

/// Writes an `FTS1` feature file. Values must be representable as `float`.
///
/// # Safety
/// `file` must be a NUL-terminated UTF-8 path.
#[no_mangle]
pub unsafe extern "C" fn symcorr_layer_stack_write(
    stack: *const SymcorrLayerStack,
    file: *const c_char,
) -> SymcorrStatus {
    guard(|| Ok(write_features(path(file)?, &get(stack, "stack")?.inner)?))
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn symcorr_layer_stack_len(
    stack: *const SymcorrLayerStack,
    out: *mut usize,
) -> SymcorrStatus {
    guard(|| put(out, get(stack, "stack")?.inner.len(), "out"))
}

/// # Safety
/// `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn symcorr_layer_stack_shape(
    stack: *const SymcorrLayerStack,
    layer: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> SymcorrStatus {
    guard(|| {
        let s = &get(stack, "stack")?.inner;
        let t = s.layers().get(layer).ok_or_else(|| {
            contract(format!("layer {layer} out of range for {} layers", s.len()))
        })?;
        put(rows, t.tokens(), "rows")?;
        put(cols, t.dim(), "cols")
    })
}

/// Copies layer `layer`; `len` must equal its rows × cols.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn symcorr_layer_stack_copy(
    stack: *const SymcorrLayerStack,
    layer: usize,
    out: *mut f64,
    len: usize,
) -> SymcorrStatus {
    guard(|| {
        let s = &get(stack, "stack")?.inner;
        let m = s
            .layers()
            .get(layer)
            .ok_or_else(|| contract(format!("layer {layer} out of range for {} layers", s.len())))?
            .values();
        if len != m.data().len() {
            return Err(contract(format!(
                "buffer holds {len} values, layer has {}",
                m.data().len()
            )));
        }
        slice_mut(out, len, "out")?.copy_from_slice(m.data());
        Ok(())
    })
}

/// # Safety
/// `stack` must come from a layer-stack constructor and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn symcorr_layer_stack_free(stack: *mut SymcorrLayerStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}
