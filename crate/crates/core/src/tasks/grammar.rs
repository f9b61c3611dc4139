//! Exact wire grammar for task examples, and its strict parser.
//!
//! ```text
//! dist(c_AAAA,c_BBBB)=V
//! triarea(c_AAAA,c_BBBB,c_CCCC)=V
//! angle(c_AAAA,c_BBBB,c_CCCC)=V
//! compass(c_AAAA,c_BBBB)=DIR
//! inside(c_PPPP;c_H1,...,c_Hn)=TRUE|FALSE
//! perimeter(c_AAAA,...,c_NNNN)=V
//! cross(c_AAAA,c_BBBB;c_CCCC,c_DDDD)=TRUE|FALSE
//! ```
//!
//! Ids are zero-padded to 4 digits; integers render without leading zeros;
//! no spaces anywhere. The rendered string is the file and wire format,
//! byte-exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::geometry::{self, CompassDir, Point};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Distance,
    TriArea,
    Angle,
    Compass,
    Inside,
    Perimeter,
    Crossing,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Distance,
        TaskKind::TriArea,
        TaskKind::Angle,
        TaskKind::Compass,
        TaskKind::Inside,
        TaskKind::Perimeter,
        TaskKind::Crossing,
    ];

    /// Function token in the grammar.
    pub fn token(self) -> &'static str {
        match self {
            TaskKind::Distance => "dist",
            TaskKind::TriArea => "triarea",
            TaskKind::Angle => "angle",
            TaskKind::Compass => "compass",
            TaskKind::Inside => "inside",
            TaskKind::Perimeter => "perimeter",
            TaskKind::Crossing => "cross",
        }
    }

    /// Task name used in configs and reports.
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Distance => "distance",
            TaskKind::TriArea => "triarea",
            TaskKind::Angle => "angle",
            TaskKind::Compass => "compass",
            TaskKind::Inside => "inside",
            TaskKind::Perimeter => "perimeter",
            TaskKind::Crossing => "crossing",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.token() == s)
    }

    pub fn is_categorical(self) -> bool {
        matches!(self, TaskKind::Compass | TaskKind::Inside | TaskKind::Crossing)
    }

    /// Index (0-based) of the id after which a `;` group separator sits,
    /// if the task has grouped arguments.
    fn group_sep_after(self) -> Option<usize> {
        match self {
            TaskKind::Inside => Some(0),
            TaskKind::Crossing => Some(1),
            _ => None,
        }
    }

    /// (min, max) number of city ids.
    pub fn arity(self) -> (usize, usize) {
        match self {
            TaskKind::Distance | TaskKind::Compass => (2, 2),
            TaskKind::TriArea | TaskKind::Angle => (3, 3),
            TaskKind::Crossing => (4, 4),
            TaskKind::Inside => (4, usize::MAX), // probe + at least 3 hull cities
            TaskKind::Perimeter => (3, usize::MAX),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Answer {
    Num(i64),
    Dir(CompassDir),
    Flag(bool),
}

impl Answer {
    fn render(self) -> String {
        match self {
            Answer::Num(v) => v.to_string(),
            Answer::Dir(d) => d.as_str().to_string(),
            Answer::Flag(true) => "TRUE".to_string(),
            Answer::Flag(false) => "FALSE".to_string(),
        }
    }

    fn matches(self, kind: TaskKind) -> bool {
        match kind {
            TaskKind::Compass => matches!(self, Answer::Dir(_)),
            TaskKind::Inside | TaskKind::Crossing => matches!(self, Answer::Flag(_)),
            _ => matches!(self, Answer::Num(_)),
        }
    }
}

/// One task query: kind, ordered city ids (grouping implied by the kind),
/// answer, and the rendered text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskExample {
    pub kind: TaskKind,
    pub ids: Vec<u16>,
    pub answer: Answer,
    pub text: String,
}

impl TaskExample {
    pub fn new(kind: TaskKind, ids: Vec<u16>, answer: Answer) -> Result<Self> {
        let text = render_example(kind, &ids, answer)?;
        Ok(TaskExample { kind, ids, answer, text })
    }

    /// The teacher-forcing prompt: everything up to and including `=`.
    pub fn prompt(&self) -> &str {
        let eq = self.text.find('=').expect("rendered example contains '='");
        &self.text[..=eq]
    }
}

/// A parse result; `answer` is `None` for the prompt form `task(...)=`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedExample {
    pub kind: TaskKind,
    pub ids: Vec<u16>,
    pub answer: Option<Answer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnknownTask,
    ExpectedChar(char),
    BadId,
    BadGroups,
    BadAnswer,
    TrailingGarbage,
    UnexpectedEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("parse error at byte {pos}: {kind:?}")]
pub struct ParseError {
    pub pos: usize,
    pub kind: ParseErrorKind,
}

/// Computes the task answer from coordinates ordered like the example's ids.
pub fn compute_answer(kind: TaskKind, pts: &[Point]) -> Result<Answer> {
    let (min, max) = kind.arity();
    if pts.len() < min || pts.len() > max {
        return Err(Error::Arity {
            task: kind.name(),
            expected: "task arity",
            got: pts.len(),
        });
    }
    Ok(match kind {
        TaskKind::Distance => Answer::Num(geometry::distance(pts[0], pts[1])),
        TaskKind::TriArea => Answer::Num(geometry::tri_area(pts[0], pts[1], pts[2])),
        TaskKind::Angle => Answer::Num(geometry::angle(pts[0], pts[1], pts[2])?),
        TaskKind::Compass => Answer::Dir(geometry::compass(pts[0], pts[1])?),
        TaskKind::Inside => Answer::Flag(geometry::inside(pts[0], &pts[1..])?),
        TaskKind::Perimeter => Answer::Num(geometry::perimeter(pts)?),
        TaskKind::Crossing => Answer::Flag(geometry::crossing(pts[0], pts[1], pts[2], pts[3])),
    })
}

pub fn render_example(kind: TaskKind, ids: &[u16], answer: Answer) -> Result<String> {
    let (min, max) = kind.arity();
    if ids.len() < min || ids.len() > max {
        return Err(Error::Arity {
            task: kind.name(),
            expected: "task arity",
            got: ids.len(),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i > 9999) {
        return Err(Error::Arity {
            task: kind.name(),
            expected: "ids in [0, 9999]",
            got: bad as usize,
        });
    }
    if !answer.matches(kind) {
        return Err(Error::AnswerKind {
            task: kind.name(),
            answer: answer.render(),
        });
    }
    let mut s = String::with_capacity(16 + 7 * ids.len());
    s.push_str(kind.token());
    s.push('(');
    let sep_after = kind.group_sep_after();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(if sep_after == Some(i - 1) { ';' } else { ',' });
        }
        s.push_str(&format!("c_{id:04}"));
    }
    s.push_str(")=");
    s.push_str(&answer.render());
    Ok(s)
}

/// Strict parser for the grammar. Accepts the prompt form (text ending at
/// `=`) by returning `answer: None`; anything else malformed is a typed
/// error with a byte position.
pub fn parse_example(text: &str) -> std::result::Result<ParsedExample, ParseError> {
    let b = text.as_bytes();
    let mut pos;

    let paren = b
        .iter()
        .position(|&c| c == b'(')
        .ok_or(ParseError { pos: text.len().min(32), kind: ParseErrorKind::UnknownTask })?;
    let kind = TaskKind::from_token(&text[..paren])
        .ok_or(ParseError { pos: 0, kind: ParseErrorKind::UnknownTask })?;
    pos = paren + 1;

    let mut ids: Vec<u16> = Vec::new();
    let mut seps: Vec<u8> = Vec::new();
    loop {
        if pos + 6 > b.len() || b[pos] != b'c' || b[pos + 1] != b'_' {
            return Err(ParseError { pos, kind: ParseErrorKind::BadId });
        }
        let digits = &b[pos + 2..pos + 6];
        if !digits.iter().all(|c| c.is_ascii_digit()) {
            return Err(ParseError { pos: pos + 2, kind: ParseErrorKind::BadId });
        }
        let id: u16 = text[pos + 2..pos + 6].parse().unwrap();
        ids.push(id);
        pos += 6;
        match b.get(pos) {
            Some(b',') | Some(b';') => {
                seps.push(b[pos]);
                pos += 1;
            }
            Some(b')') => {
                pos += 1;
                break;
            }
            Some(_) => return Err(ParseError { pos, kind: ParseErrorKind::ExpectedChar(')') }),
            None => return Err(ParseError { pos, kind: ParseErrorKind::UnexpectedEnd }),
        }
    }

    // group structure: exactly one ';' at the kind's position, or none
    let semis: Vec<usize> = seps
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == b';')
        .map(|(i, _)| i)
        .collect();
    let ok_groups = match kind.group_sep_after() {
        Some(at) => semis == [at],
        None => semis.is_empty(),
    };
    let (min, max) = kind.arity();
    if !ok_groups || ids.len() < min || ids.len() > max {
        return Err(ParseError { pos, kind: ParseErrorKind::BadGroups });
    }

    if b.get(pos) != Some(&b'=') {
        return Err(ParseError { pos, kind: ParseErrorKind::ExpectedChar('=') });
    }
    pos += 1;

    if pos == b.len() {
        return Ok(ParsedExample { kind, ids, answer: None }); // prompt form
    }
    let tail = &text[pos..];
    let answer = parse_answer(kind, tail).ok_or(ParseError { pos, kind: ParseErrorKind::BadAnswer })?;
    Ok(ParsedExample { kind, ids, answer: Some(answer) })
}

fn parse_answer(kind: TaskKind, tail: &str) -> Option<Answer> {
    match kind {
        TaskKind::Compass => CompassDir::from_str(tail).map(Answer::Dir),
        TaskKind::Inside | TaskKind::Crossing => match tail {
            "TRUE" => Some(Answer::Flag(true)),
            "FALSE" => Some(Answer::Flag(false)),
            _ => None,
        },
        _ => {
            let (sign, digits) = match tail.strip_prefix('-') {
                Some(rest) => (-1i64, rest),
                None => (1i64, tail),
            };
            if digits.is_empty() || !digits.bytes().all(|c| c.is_ascii_digit()) {
                return None;
            }
            if digits.len() > 1 && digits.starts_with('0') {
                return None; // no leading zeros
            }
            if sign < 0 && digits == "0" {
                return None; // "-0" is not render-canonical
            }
            digits.parse::<i64>().ok().map(|v| Answer::Num(sign * v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn renders_paper_strings_byte_exact() {
        assert_eq!(
            render_example(TaskKind::Distance, &[865, 4879], Answer::Num(769)).unwrap(),
            "dist(c_0865,c_4879)=769"
        );
        assert_eq!(
            render_example(TaskKind::Crossing, &[2345, 6789, 123, 4567], Answer::Flag(true))
                .unwrap(),
            "cross(c_2345,c_6789;c_0123,c_4567)=TRUE"
        );
    }

    #[test]
    fn renders_all_shapes() {
        assert_eq!(
            render_example(TaskKind::Inside, &[9012, 3456, 7, 88], Answer::Flag(false)).unwrap(),
            "inside(c_9012;c_3456,c_0007,c_0088)=FALSE"
        );
        assert_eq!(
            render_example(TaskKind::Compass, &[1234, 5678], Answer::Dir(CompassDir::NE))
                .unwrap(),
            "compass(c_1234,c_5678)=NE"
        );
        assert_eq!(
            render_example(TaskKind::Perimeter, &[1, 2, 3, 4], Answer::Num(2856)).unwrap(),
            "perimeter(c_0001,c_0002,c_0003,c_0004)=2856"
        );
    }

    #[test]
    fn render_rejects_bad_inputs() {
        assert!(render_example(TaskKind::Distance, &[1], Answer::Num(0)).is_err());
        assert!(render_example(TaskKind::Distance, &[1, 2], Answer::Flag(true)).is_err());
        assert!(render_example(TaskKind::Inside, &[1, 2, 3], Answer::Flag(true)).is_err());
    }

    #[test]
    fn parses_paper_string() {
        let p = parse_example("dist(c_0865,c_4879)=769").unwrap();
        assert_eq!(p.kind, TaskKind::Distance);
        assert_eq!(p.ids, vec![865, 4879]);
        assert_eq!(p.answer, Some(Answer::Num(769)));
    }

    #[test]
    fn parses_prompt_form() {
        let p = parse_example("dist(c_0865,c_4879)=").unwrap();
        assert_eq!(p.answer, None);
        assert_eq!(p.ids, vec![865, 4879]);
    }

    #[test]
    fn parse_errors_are_typed_and_positioned() {
        let e = parse_example("frob(c_0001,c_0002)=3").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnknownTask);
        let e = parse_example("dist(c_01,c_0002)=3").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::BadId);
        assert_eq!(e.pos, 7);
        let e = parse_example("dist(c_0001,c_0002)=NE").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::BadAnswer);
        let e = parse_example("dist(c_0001,c_0002)=33x").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::BadAnswer);
        let e = parse_example("dist(c_0001;c_0002)=3").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::BadGroups);
        let e = parse_example("cross(c_0001,c_0002,c_0003,c_0004)=TRUE").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::BadGroups);
        let e = parse_example("dist(c_0001,c_0002)=0769").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::BadAnswer);
    }

    fn random_example(kind: TaskKind, r: &mut impl Rng) -> TaskExample {
        let n = match kind {
            TaskKind::Distance | TaskKind::Compass => 2,
            TaskKind::TriArea | TaskKind::Angle => 3,
            TaskKind::Crossing => 4,
            TaskKind::Inside => 1 + r.random_range(3..=6),
            TaskKind::Perimeter => r.random_range(3..=5),
        };
        let ids: Vec<u16> = (0..n).map(|_| r.random_range(0..10000)).collect();
        let answer = match kind {
            TaskKind::Compass => Answer::Dir(CompassDir::ALL[r.random_range(0..8)]),
            TaskKind::Inside | TaskKind::Crossing => Answer::Flag(r.random_bool(0.5)),
            _ => Answer::Num(r.random_range(0..100000)),
        };
        TaskExample::new(kind, ids, answer).unwrap()
    }

    #[test]
    fn round_trip_random_examples() {
        let mut r = rng::stream(21, "grammar_rt", 0);
        for kind in TaskKind::ALL {
            for _ in 0..500 {
                let e = random_example(kind, &mut r);
                let p = parse_example(&e.text).unwrap();
                assert_eq!(p.kind, e.kind);
                assert_eq!(p.ids, e.ids);
                assert_eq!(p.answer, Some(e.answer));
                // and the other direction: re-rendering a parsed well-formed
                // string reproduces it byte for byte
                let again = render_example(p.kind, &p.ids, p.answer.unwrap()).unwrap();
                assert_eq!(again, e.text);
            }
        }
    }

    #[test]
    fn negative_zero_rejected() {
        assert!(parse_example("dist(c_0001,c_0002)=-0").is_err());
        assert_eq!(
            parse_example("dist(c_0001,c_0002)=0").unwrap().answer,
            Some(Answer::Num(0))
        );
    }

    #[test]
    fn prompt_ends_at_equals() {
        let e = TaskExample::new(TaskKind::Distance, vec![865, 4879], Answer::Num(769)).unwrap();
        assert_eq!(e.prompt(), "dist(c_0865,c_4879)=");
    }
}
