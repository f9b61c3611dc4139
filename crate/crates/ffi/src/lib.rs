//! C ABI for the worldrep toolkit.
//!
//! Conventions:
//! - Handles (`WrWorld`, `WrTokenizer`, `WrModel`, `WrExample`) are opaque;
//!   free them with the matching `wr_*_free`.
//! - Functions return [`WrStatus`]; on anything but `Ok` the message is
//!   available through [`wr_last_error_message`] (thread-local).
//! - Strings returned through `*mut c_char` out-params are NUL-terminated,
//!   allocated by this library, and must be released with [`wr_string_free`].
//! - Coordinates are the integer scaled units (`x = round(10 * lon)`,
//!   `y = round(10 * lat)`); compass directions and task kinds are indices
//!   into the fixed orders documented on [`wr_compass_name`] and
//!   [`wr_task_name`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use worldrep::datagen::{self, AtlantisPolicy, Condition};
use worldrep::eval;
use worldrep::model::Model;
use worldrep::tasks::{self, Answer, CompassDir, Point, TaskKind};
use worldrep::tokenizer::Tokenizer;
use worldrep::world::World;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum WrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Utf8 = 3,
    Io = 4,
    Parse = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &worldrep::Error) -> WrStatus {
    use worldrep::Error as E;
    match err {
        E::Io { .. } | E::MissingArtifact(_) => WrStatus::Io,
        E::Parse(_) => WrStatus::Parse,
        E::Config(_)
        | E::DatasetSpec(_)
        | E::MalformedWorldFile { .. }
        | E::WorldVersion { .. }
        | E::EmptyWorld
        | E::IdSpaceExhausted { .. }
        | E::IdCollision { .. }
        | E::UnassignedIds
        | E::Arity { .. }
        | E::AnswerKind { .. }
        | E::DegenerateGeometry(_)
        | E::OutOfVocab { .. }
        | E::InvalidTokenId { .. }
        | E::SequenceTooLong { .. }
        | E::LayerOutOfRange { .. }
        | E::DegenerateBaselines { .. }
        | E::EmptyEvalSet
        | E::Misaligned(_)
        | E::Shape(_) => WrStatus::InvalidArgument,
        _ => WrStatus::Internal,
    }
}

fn fail(err: worldrep::Error) -> WrStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

/// Runs `f`, converting errors and panics into status codes.
fn guarded(f: impl FnOnce() -> Result<WrStatus, worldrep::Error>) -> WrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("internal panic");
            WrStatus::Internal
        }
    }
}

fn null_ptr() -> WrStatus {
    set_error("null pointer argument");
    WrStatus::NullPointer
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, WrStatus> {
    if ptr.is_null() {
        return Err(null_ptr());
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        WrStatus::Utf8
    })
}

fn string_out(s: String, out: *mut *mut c_char) -> WrStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            WrStatus::Ok
        }
        Err(_) => {
            set_error("output contains interior NUL");
            WrStatus::Internal
        }
    }
}

/// Library version string (static; do not free).
#[no_mangle]
pub extern "C" fn wr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message for this thread into `buf` (truncating) and
/// returns the full message length in bytes, or 0 when no error is recorded.
#[no_mangle]
pub extern "C" fn wr_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Frees a string allocated by this library.
///
/// # Safety
/// `s` must have been returned by a `wr_*` function and not freed before.
#[no_mangle]
pub unsafe extern "C" fn wr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

// ------------------------------------------------------------------ world

pub struct WrWorld {
    inner: World,
}

/// Ingests a GeoNames-format TSV, keeping rows with population strictly
/// above `min_population`. Ids are not assigned yet.
///
/// # Safety
/// `path` must be a valid NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_world_ingest(
    path: *const c_char,
    min_population: i64,
    out: *mut *mut WrWorld,
) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    let path = match unsafe { cstr_arg(path) } {
        Ok(p) => PathBuf::from(p),
        Err(s) => return s,
    };
    guarded(|| {
        let (world, _) = worldrep::world::ingest_geonames(&path, min_population)?;
        unsafe { *out = Box::into_raw(Box::new(WrWorld { inner: world })) };
        Ok(WrStatus::Ok)
    })
}

/// Loads a saved world file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_world_load(path: *const c_char, out: *mut *mut WrWorld) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    let path = match unsafe { cstr_arg(path) } {
        Ok(p) => PathBuf::from(p),
        Err(s) => return s,
    };
    guarded(|| {
        let world = worldrep::world::load_world(&path)?;
        unsafe { *out = Box::into_raw(Box::new(WrWorld { inner: world })) };
        Ok(WrStatus::Ok)
    })
}

/// Saves the world (requires assigned ids).
///
/// # Safety
/// `world` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wr_world_save(world: *const WrWorld, path: *const c_char) -> WrStatus {
    let Some(w) = (unsafe { world.as_ref() }) else {
        return null_ptr();
    };
    let path = match unsafe { cstr_arg(path) } {
        Ok(p) => PathBuf::from(p),
        Err(s) => return s,
    };
    guarded(|| {
        worldrep::world::save_world(&w.inner, &path)?;
        Ok(WrStatus::Ok)
    })
}

/// Assigns random ids from [0, 9999] in place.
///
/// # Safety
/// `world` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wr_world_assign_ids(world: *mut WrWorld, seed: u64) -> WrStatus {
    let Some(w) = (unsafe { world.as_mut() }) else {
        return null_ptr();
    };
    guarded(|| {
        w.inner = worldrep::world::assign_ids(&w.inner, seed)?;
        Ok(WrStatus::Ok)
    })
}

/// Samples `count` atlantis cities (Gaussian in degrees around the center)
/// and applies the update in place.
///
/// # Safety
/// `world` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wr_world_add_atlantis(
    world: *mut WrWorld,
    count: usize,
    center_lon: f64,
    center_lat: f64,
    std_deg: f64,
    seed: u64,
) -> WrStatus {
    let Some(w) = (unsafe { world.as_mut() }) else {
        return null_ptr();
    };
    guarded(|| {
        let update =
            worldrep::world::generate_atlantis(&w.inner, count, center_lon, center_lat, std_deg, seed)?;
        w.inner = worldrep::world::apply_update(&w.inner, &update)?;
        Ok(WrStatus::Ok)
    })
}

/// Number of cities, or -1 on a null handle.
///
/// # Safety
/// `world` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wr_world_city_count(world: *const WrWorld) -> i64 {
    unsafe { world.as_ref() }.map_or(-1, |w| w.inner.len() as i64)
}

/// Number of atlantis cities, or -1 on a null handle.
///
/// # Safety
/// `world` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wr_world_atlantis_count(world: *const WrWorld) -> i64 {
    unsafe { world.as_ref() }.map_or(-1, |w| w.inner.atlantis_count() as i64)
}

/// # Safety
/// `world` must be a live handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn wr_world_free(world: *mut WrWorld) {
    if !world.is_null() {
        drop(unsafe { Box::from_raw(world) });
    }
}

// ------------------------------------------------------------------ tasks

/// Name of compass direction `idx` in the fixed order
/// N, NE, E, SE, S, SW, W, NW; null for an invalid index. Do not free.
#[no_mangle]
pub extern "C" fn wr_compass_name(idx: u8) -> *const c_char {
    const NAMES: [&[u8]; 8] = [b"N\0", b"NE\0", b"E\0", b"SE\0", b"S\0", b"SW\0", b"W\0", b"NW\0"];
    NAMES
        .get(idx as usize)
        .map_or(std::ptr::null(), |n| n.as_ptr() as *const c_char)
}

/// Name of task kind `idx` in the fixed order distance, triarea, angle,
/// compass, inside, perimeter, crossing; null for an invalid index. Do not
/// free.
#[no_mangle]
pub extern "C" fn wr_task_name(idx: u8) -> *const c_char {
    const NAMES: [&[u8]; 7] = [
        b"distance\0",
        b"triarea\0",
        b"angle\0",
        b"compass\0",
        b"inside\0",
        b"perimeter\0",
        b"crossing\0",
    ];
    NAMES
        .get(idx as usize)
        .map_or(std::ptr::null(), |n| n.as_ptr() as *const c_char)
}

fn task_of(idx: u8) -> Result<TaskKind, WrStatus> {
    TaskKind::ALL.get(idx as usize).copied().ok_or_else(|| {
        set_error("task index out of range 0..7");
        WrStatus::InvalidArgument
    })
}

/// Rounded Euclidean distance between two points in scaled units.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_task_distance(
    ax: i64,
    ay: i64,
    bx: i64,
    by: i64,
    out: *mut i64,
) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    unsafe { *out = tasks::distance(Point { x: ax, y: ay }, Point { x: bx, y: by }) };
    WrStatus::Ok
}

/// Rounded triangle area (scaled units squared).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_task_triarea(
    ax: i64,
    ay: i64,
    bx: i64,
    by: i64,
    cx: i64,
    cy: i64,
    out: *mut i64,
) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    unsafe {
        *out = tasks::tri_area(
            Point { x: ax, y: ay },
            Point { x: bx, y: by },
            Point { x: cx, y: cy },
        )
    };
    WrStatus::Ok
}

/// Interior angle at the middle vertex, rounded degrees in [0, 180].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_task_angle(
    ax: i64,
    ay: i64,
    bx: i64,
    by: i64,
    cx: i64,
    cy: i64,
    out: *mut i64,
) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    guarded(|| {
        let v = tasks::angle(
            Point { x: ax, y: ay },
            Point { x: bx, y: by },
            Point { x: cx, y: cy },
        )?;
        unsafe { *out = v };
        Ok(WrStatus::Ok)
    })
}

/// Compass sector of the bearing from a to b; see [`wr_compass_name`].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_task_compass(
    ax: i64,
    ay: i64,
    bx: i64,
    by: i64,
    out: *mut u8,
) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    guarded(|| {
        let dir = tasks::compass(Point { x: ax, y: ay }, Point { x: bx, y: by })?;
        let idx = CompassDir::ALL.iter().position(|&d| d == dir).unwrap() as u8;
        unsafe { *out = idx };
        Ok(WrStatus::Ok)
    })
}

unsafe fn points_arg(pts: *const i64, n: usize) -> Result<Vec<Point>, WrStatus> {
    if pts.is_null() {
        return Err(null_ptr());
    }
    let flat = unsafe { std::slice::from_raw_parts(pts, n * 2) };
    Ok(flat
        .chunks_exact(2)
        .map(|c| Point { x: c[0], y: c[1] })
        .collect())
}

/// TRUE iff (px, py) lies in the convex hull of `n_pts` points given as
/// x0,y0,x1,y1,... Requires at least 3 points.
///
/// # Safety
/// `pts` must point to `2 * n_pts` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wr_task_inside(
    px: i64,
    py: i64,
    pts: *const i64,
    n_pts: usize,
    out: *mut bool,
) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    let hull = match unsafe { points_arg(pts, n_pts) } {
        Ok(h) => h,
        Err(s) => return s,
    };
    guarded(|| {
        let v = tasks::inside(Point { x: px, y: py }, &hull)?;
        unsafe { *out = v };
        Ok(WrStatus::Ok)
    })
}

/// Rounded perimeter of the closed polygon in the given vertex order.
///
/// # Safety
/// `pts` must point to `2 * n_pts` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wr_task_perimeter(
    pts: *const i64,
    n_pts: usize,
    out: *mut i64,
) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    let poly = match unsafe { points_arg(pts, n_pts) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| {
        let v = tasks::perimeter(&poly)?;
        unsafe { *out = v };
        Ok(WrStatus::Ok)
    })
}

/// TRUE iff closed segments (a, b) and (c, d) intersect.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn wr_task_crossing(
    ax: i64,
    ay: i64,
    bx: i64,
    by: i64,
    cx: i64,
    cy: i64,
    dx: i64,
    dy: i64,
    out: *mut bool,
) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    unsafe {
        *out = tasks::crossing(
            Point { x: ax, y: ay },
            Point { x: bx, y: by },
            Point { x: cx, y: cy },
            Point { x: dx, y: dy },
        )
    };
    WrStatus::Ok
}

// ---------------------------------------------------------------- grammar

pub struct WrExample {
    inner: tasks::ParsedExample,
}

/// Strict parse of one example line; prompt forms (`task(...)=`) parse with
/// no answer.
///
/// # Safety
/// `text` must be a valid NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_parse_example(
    text: *const c_char,
    out: *mut *mut WrExample,
) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    let text = match unsafe { cstr_arg(text) } {
        Ok(t) => t,
        Err(s) => return s,
    };
    match tasks::parse_example(text) {
        Ok(inner) => {
            unsafe { *out = Box::into_raw(Box::new(WrExample { inner })) };
            WrStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            WrStatus::Parse
        }
    }
}

/// Task kind index of a parsed example (see [`wr_task_name`]).
///
/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wr_example_kind(e: *const WrExample) -> u8 {
    unsafe { e.as_ref() }
        .map(|x| TaskKind::ALL.iter().position(|&t| t == x.inner.kind).unwrap() as u8)
        .unwrap_or(u8::MAX)
}

/// Number of city ids in a parsed example.
///
/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wr_example_id_count(e: *const WrExample) -> usize {
    unsafe { e.as_ref() }.map_or(0, |x| x.inner.ids.len())
}

/// Copies up to `cap` city ids into `buf`; returns the total id count.
///
/// # Safety
/// `e` must be a live handle; `buf` must hold `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn wr_example_ids(e: *const WrExample, buf: *mut u16, cap: usize) -> usize {
    let Some(x) = (unsafe { e.as_ref() }) else {
        return 0;
    };
    if !buf.is_null() {
        let n = x.inner.ids.len().min(cap);
        unsafe { std::ptr::copy_nonoverlapping(x.inner.ids.as_ptr(), buf, n) };
    }
    x.inner.ids.len()
}

/// Whether the example carries an answer (prompt forms do not).
///
/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wr_example_has_answer(e: *const WrExample) -> bool {
    unsafe { e.as_ref() }.is_some_and(|x| x.inner.answer.is_some())
}

/// The answer rendered as text ("769", "NE", "TRUE"); free with
/// [`wr_string_free`]. Fails on prompt forms.
///
/// # Safety
/// `e` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_example_answer_text(
    e: *const WrExample,
    out: *mut *mut c_char,
) -> WrStatus {
    let Some(x) = (unsafe { e.as_ref() }) else {
        return null_ptr();
    };
    if out.is_null() {
        return null_ptr();
    }
    match &x.inner.answer {
        Some(a) => string_out(render_answer(a), out),
        None => {
            set_error("example is a prompt (no answer)");
            WrStatus::InvalidArgument
        }
    }
}

/// # Safety
/// `e` must be a live handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn wr_example_free(e: *mut WrExample) {
    if !e.is_null() {
        drop(unsafe { Box::from_raw(e) });
    }
}

fn render_answer(a: &Answer) -> String {
    match a {
        Answer::Num(v) => v.to_string(),
        Answer::Dir(d) => d.as_str().to_string(),
        Answer::Flag(true) => "TRUE".into(),
        Answer::Flag(false) => "FALSE".into(),
    }
}

fn parse_answer_text(kind: TaskKind, text: &str) -> Option<Answer> {
    match kind {
        TaskKind::Compass => CompassDir::from_str(text).map(Answer::Dir),
        TaskKind::Inside | TaskKind::Crossing => match text {
            "TRUE" => Some(Answer::Flag(true)),
            "FALSE" => Some(Answer::Flag(false)),
            _ => None,
        },
        _ => text.parse::<i64>().ok().map(Answer::Num),
    }
}

/// Renders an example in the exact wire grammar. `answer` is the answer as
/// text ("769", "NE", "TRUE"). Free the result with [`wr_string_free`].
///
/// # Safety
/// `ids` must point to `n_ids` entries; `answer` must be a valid string;
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_render_example(
    kind: u8,
    ids: *const u16,
    n_ids: usize,
    answer: *const c_char,
    out: *mut *mut c_char,
) -> WrStatus {
    if out.is_null() || ids.is_null() {
        return null_ptr();
    }
    let kind = match task_of(kind) {
        Ok(k) => k,
        Err(s) => return s,
    };
    let answer = match unsafe { cstr_arg(answer) } {
        Ok(a) => a,
        Err(s) => return s,
    };
    let Some(answer) = parse_answer_text(kind, answer) else {
        set_error("answer text not valid for this task");
        return WrStatus::InvalidArgument;
    };
    let ids = unsafe { std::slice::from_raw_parts(ids, n_ids) };
    guarded(|| {
        let text = tasks::render_example(kind, ids, answer)?;
        Ok(string_out(text, out))
    })
}

// -------------------------------------------------------------- tokenizer

pub struct WrTokenizer {
    inner: Tokenizer,
}

/// The fixed 101-token character tokenizer.
#[no_mangle]
pub extern "C" fn wr_tokenizer_new() -> *mut WrTokenizer {
    Box::into_raw(Box::new(WrTokenizer { inner: Tokenizer::new() }))
}

/// Encodes `text` as BOS + characters + EOS. Writes up to `cap` ids and
/// stores the full length in `out_len`; fails with `InvalidArgument` when
/// `cap` is too small (with `out_len` still set).
///
/// # Safety
/// `tok` must be live; `text` a valid string; `out_ids` must hold `cap`
/// entries; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wr_tokenizer_encode(
    tok: *const WrTokenizer,
    text: *const c_char,
    out_ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> WrStatus {
    let Some(t) = (unsafe { tok.as_ref() }) else {
        return null_ptr();
    };
    if out_len.is_null() {
        return null_ptr();
    }
    let text = match unsafe { cstr_arg(text) } {
        Ok(s) => s,
        Err(s) => return s,
    };
    guarded(|| {
        let ids = t.inner.encode(text)?;
        unsafe { *out_len = ids.len() };
        if ids.len() > cap {
            set_error("output buffer too small");
            return Ok(WrStatus::InvalidArgument);
        }
        if !out_ids.is_null() {
            unsafe { std::ptr::copy_nonoverlapping(ids.as_ptr(), out_ids, ids.len()) };
        }
        Ok(WrStatus::Ok)
    })
}

/// Decodes ids back to text (BOS skipped, stops at EOS). Free the result
/// with [`wr_string_free`].
///
/// # Safety
/// `tok` must be live; `ids` must hold `len` entries; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wr_tokenizer_decode(
    tok: *const WrTokenizer,
    ids: *const u32,
    len: usize,
    out: *mut *mut c_char,
) -> WrStatus {
    let Some(t) = (unsafe { tok.as_ref() }) else {
        return null_ptr();
    };
    if ids.is_null() || out.is_null() {
        return null_ptr();
    }
    let ids = unsafe { std::slice::from_raw_parts(ids, len) };
    guarded(|| {
        let text = t.inner.decode(ids)?;
        Ok(string_out(text, out))
    })
}

/// # Safety
/// `tok` must be a live handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn wr_tokenizer_free(tok: *mut WrTokenizer) {
    if !tok.is_null() {
        drop(unsafe { Box::from_raw(tok) });
    }
}

// ---------------------------------------------------------------- datagen

fn policy_of(idx: u8) -> Result<AtlantisPolicy, WrStatus> {
    match idx {
        0 => Ok(AtlantisPolicy::Exclude),
        1 => Ok(AtlantisPolicy::RequireAtLeastOne),
        2 => Ok(AtlantisPolicy::Uniform),
        _ => {
            set_error("policy must be 0 (exclude), 1 (require), or 2 (uniform)");
            Err(WrStatus::InvalidArgument)
        }
    }
}

unsafe fn tasks_arg(csv: *const c_char) -> Result<Vec<TaskKind>, WrStatus> {
    let csv = unsafe { cstr_arg(csv)? };
    csv.split(',')
        .map(|name| {
            TaskKind::from_name(name.trim()).ok_or_else(|| {
                set_error(&format!("unknown task {name:?}"));
                WrStatus::InvalidArgument
            })
        })
        .collect()
}

/// Writes a pretraining dataset (plus manifest) for the comma-separated
/// task list, `rows_per_task` rows each. Policy: 0 exclude, 2 uniform.
///
/// # Safety
/// `world` must be live; `tasks_csv` and `out_path` valid strings.
#[no_mangle]
pub unsafe extern "C" fn wr_sample_pretrain(
    world: *const WrWorld,
    tasks_csv: *const c_char,
    rows_per_task: u64,
    seed: u64,
    policy: u8,
    out_path: *const c_char,
) -> WrStatus {
    let Some(w) = (unsafe { world.as_ref() }) else {
        return null_ptr();
    };
    let tasks = match unsafe { tasks_arg(tasks_csv) } {
        Ok(t) => t,
        Err(s) => return s,
    };
    let policy = match policy_of(policy) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let path = match unsafe { cstr_arg(out_path) } {
        Ok(p) => PathBuf::from(p),
        Err(s) => return s,
    };
    guarded(|| {
        datagen::sample_pretrain(&w.inner, &tasks, rows_per_task, seed, policy, &path)?;
        Ok(WrStatus::Ok)
    })
}

/// Writes an evaluation set for one task. Condition: 0 standard, 1 atlantis.
///
/// # Safety
/// `world` must be live; `task` and `out_path` valid strings.
#[no_mangle]
pub unsafe extern "C" fn wr_sample_eval(
    world: *const WrWorld,
    task: *const c_char,
    condition: u8,
    rows: u64,
    seed: u64,
    out_path: *const c_char,
) -> WrStatus {
    let Some(w) = (unsafe { world.as_ref() }) else {
        return null_ptr();
    };
    let tasks = match unsafe { tasks_arg(task) } {
        Ok(t) => t,
        Err(s) => return s,
    };
    if tasks.len() != 1 {
        set_error("eval sets cover exactly one task");
        return WrStatus::InvalidArgument;
    }
    let condition = match condition {
        0 => Condition::Standard,
        1 => Condition::Atlantis,
        _ => {
            set_error("condition must be 0 (standard) or 1 (atlantis)");
            return WrStatus::InvalidArgument;
        }
    };
    let path = match unsafe { cstr_arg(out_path) } {
        Ok(p) => PathBuf::from(p),
        Err(s) => return s,
    };
    guarded(|| {
        datagen::sample_eval(&w.inner, tasks[0], condition, rows, seed, &path)?;
        Ok(WrStatus::Ok)
    })
}

// ------------------------------------------------------------------- eval

/// Normalized improvement. `error_kind` selects the log-ratio form used for
/// error metrics; otherwise the affine accuracy form is used.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_normalized_improvement(
    value: f64,
    baseline_atlantis: f64,
    baseline_standard: f64,
    error_kind: bool,
    out: *mut f64,
) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    let kind = if error_kind {
        eval::MetricKind::AbsError
    } else {
        eval::MetricKind::Accuracy
    };
    guarded(|| {
        let ni = eval::normalized_improvement(value, baseline_atlantis, baseline_standard, kind)?;
        unsafe { *out = ni };
        Ok(WrStatus::Ok)
    })
}

/// `NI(Dj u Dk) - max(NI(Dj), NI(Dk))`.
#[no_mangle]
pub extern "C" fn wr_best_teacher_deviation(ni_pair: f64, ni_j: f64, ni_k: f64) -> f64 {
    eval::best_teacher_deviation(ni_pair, ni_j, ni_k)
}

// -------------------------------------------------------------------- cka

/// Linear-kernel CKA between two row-major matrices over the same `n_rows`
/// items (feature widths may differ).
///
/// # Safety
/// `x` must hold `n_rows * dx` floats, `y` `n_rows * dy`; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn wr_cka(
    x: *const f32,
    y: *const f32,
    n_rows: usize,
    dx: usize,
    dy: usize,
    out: *mut f64,
) -> WrStatus {
    if x.is_null() || y.is_null() || out.is_null() {
        return null_ptr();
    }
    let xs = unsafe { std::slice::from_raw_parts(x, n_rows * dx) };
    let ys = unsafe { std::slice::from_raw_parts(y, n_rows * dy) };
    guarded(|| {
        let xm = ndarray_from(xs, n_rows, dx);
        let ym = ndarray_from(ys, n_rows, dy);
        let v = worldrep::repr::cka_raw(&xm, &ym)?;
        unsafe { *out = v };
        Ok(WrStatus::Ok)
    })
}

fn ndarray_from(s: &[f32], n: usize, d: usize) -> ndarray::Array2<f32> {
    ndarray::Array2::from_shape_vec((n, d), s.to_vec()).expect("length checked by caller")
}

// ------------------------------------------------------------------ model

pub struct WrModel {
    inner: Model<f32>,
    tokenizer: Tokenizer,
}

/// Loads a trained checkpoint (the tokenizer spec inside is verified).
///
/// # Safety
/// `path` must be a valid string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_model_load(path: *const c_char, out: *mut *mut WrModel) -> WrStatus {
    if out.is_null() {
        return null_ptr();
    }
    let path = match unsafe { cstr_arg(path) } {
        Ok(p) => PathBuf::from(p),
        Err(s) => return s,
    };
    guarded(|| {
        let tokenizer = Tokenizer::new();
        let (model, _, _) = worldrep::model::load_checkpoint(&path, Some(&tokenizer.spec()))?;
        unsafe { *out = Box::into_raw(Box::new(WrModel { inner: model, tokenizer })) };
        Ok(WrStatus::Ok)
    })
}

/// Greedy completion of a text prompt (typically `task(...)=`), decoding
/// until EOS or `max_new` tokens. Free the result with [`wr_string_free`].
///
/// # Safety
/// `model` must be live; `prompt` a valid string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wr_model_generate(
    model: *const WrModel,
    prompt: *const c_char,
    max_new: usize,
    out: *mut *mut c_char,
) -> WrStatus {
    let Some(m) = (unsafe { model.as_ref() }) else {
        return null_ptr();
    };
    if out.is_null() {
        return null_ptr();
    }
    let prompt = match unsafe { cstr_arg(prompt) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| {
        let ids = m.tokenizer.encode_prefix(prompt)?;
        let generated = m.inner.generate(&ids, max_new)?;
        let content: Vec<u32> = generated
            .into_iter()
            .take_while(|&id| id != worldrep::tokenizer::EOS)
            .collect();
        let mut with_eos = content;
        with_eos.push(worldrep::tokenizer::EOS);
        let text = m.tokenizer.decode(&with_eos)?;
        Ok(string_out(text, out))
    })
}

/// # Safety
/// `model` must be a live handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn wr_model_free(model: *mut WrModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}
