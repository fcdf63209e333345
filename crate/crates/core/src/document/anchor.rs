use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::sequence::{ElementId, Sequence};

/// Which side of its element a boundary sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Before,
    After,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnchorPoint {
    pub element: ElementId,
    pub side: Side,
}

/// A span of text identified by element ids instead of offsets.
///
/// A non-empty span runs from *before* its first character to *after* its
/// last one, so text inserted exactly at either boundary lands outside the
/// span. A collapsed anchor sits after a single element (or the head).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextAnchor {
    pub start: AnchorPoint,
    pub end: AnchorPoint,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnchorError {
    #[error("dangling anchor: element {0} never existed")]
    Dangling(ElementId),
    #[error("range {start}..{end} outside document of length {len}")]
    OutOfRange { start: usize, end: usize, len: usize },
}

impl TextAnchor {
    /// Anchor covering the characters `first..=last`.
    pub fn span(first: ElementId, last: ElementId) -> Self {
        Self {
            start: AnchorPoint { element: first, side: Side::Before },
            end: AnchorPoint { element: last, side: Side::After },
        }
    }

    /// Empty anchor right after `element`.
    pub fn collapsed(element: ElementId) -> Self {
        let p = AnchorPoint { element, side: Side::After };
        Self { start: p, end: p }
    }

    /// Builds an anchor over the visible offsets `range`.
    pub fn from_range(seq: &Sequence, range: Range<usize>) -> Result<Self, AnchorError> {
        let len = seq.len();
        if range.start > range.end || range.end > len {
            return Err(AnchorError::OutOfRange { start: range.start, end: range.end, len });
        }
        if range.is_empty() {
            let left = if range.start == 0 { ElementId::HEAD } else { seq.id_at(range.start - 1).expect("in range") };
            return Ok(Self::collapsed(left));
        }
        let first = seq.id_at(range.start).expect("in range");
        let last = seq.id_at(range.end - 1).expect("in range");
        Ok(Self::span(first, last))
    }

    pub fn is_collapsed(&self) -> bool {
        self.start == self.end
    }

    /// Current visible offsets of the anchor. Always `start <= end`.
    pub fn resolve(&self, seq: &Sequence) -> Result<Range<usize>, AnchorError> {
        let start = resolve_point(seq, self.start)?;
        let end = resolve_point(seq, self.end)?;
        Ok(start..end.max(start))
    }

    pub fn text(&self, seq: &Sequence) -> Result<String, AnchorError> {
        let range = self.resolve(seq)?;
        Ok(seq.text().chars().skip(range.start).take(range.len()).collect())
    }

    /// Ids of every element inside the span, tombstones included.
    pub fn interior(&self, seq: &Sequence) -> Result<Vec<ElementId>, AnchorError> {
        if self.is_collapsed() {
            return Ok(Vec::new());
        }
        let first = seq.position(self.start.element).ok_or(AnchorError::Dangling(self.start.element))?;
        let last = seq.position(self.end.element).ok_or(AnchorError::Dangling(self.end.element))?;
        Ok(seq.elements()[first..=last].iter().map(|e| e.id).collect())
    }
}

fn resolve_point(seq: &Sequence, point: AnchorPoint) -> Result<usize, AnchorError> {
    let before = seq.visible_before(point.element).ok_or(AnchorError::Dangling(point.element))?;
    Ok(match point.side {
        Side::Before => before,
        Side::After if point.element.is_head() => 0,
        Side::After => before + usize::from(seq.is_deleted(point.element) == Some(false)),
    })
}

/// True if two half-open ranges share at least one character.
pub fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

#[cfg(test)]
mod tests {
    use super::super::sequence::ReplicaId;
    use super::*;

    fn doc(text: &str) -> Sequence {
        let mut s = Sequence::new(ReplicaId(1));
        s.insert(0, text).unwrap();
        s
    }

    #[test]
    fn anchor_follows_its_text() {
        let mut s = doc("hello world");
        let a = TextAnchor::from_range(&s, 6..11).unwrap();
        s.insert(6, "big ").unwrap();
        assert_eq!(s.text(), "hello big world");
        assert_eq!(a.resolve(&s).unwrap(), 10..15);
        assert_eq!(a.text(&s).unwrap(), "world");
    }

    #[test]
    fn boundary_inserts_fall_outside() {
        let mut s = doc("abcdef");
        let a = TextAnchor::from_range(&s, 2..4).unwrap();
        s.insert(4, "X").unwrap();
        s.insert(2, "Y").unwrap();
        assert_eq!(s.text(), "abYcdXef");
        assert_eq!(a.text(&s).unwrap(), "cd");
    }

    #[test]
    fn fully_deleted_span_is_empty_at_deletion_point() {
        let mut s = doc("abcdef");
        let a = TextAnchor::from_range(&s, 2..4).unwrap();
        s.delete(1, 4).unwrap();
        assert_eq!(s.text(), "af");
        assert_eq!(a.resolve(&s).unwrap(), 1..1);
    }

    #[test]
    fn edits_after_the_anchor_leave_offsets_alone() {
        let mut s = doc("abcdef");
        let a = TextAnchor::from_range(&s, 0..3).unwrap();
        s.insert(5, "zz").unwrap();
        s.delete(4, 1).unwrap();
        assert_eq!(a.resolve(&s).unwrap(), 0..3);
    }

    #[test]
    fn collapsed_anchor_at_head() {
        let s = doc("abc");
        let a = TextAnchor::from_range(&s, 0..0).unwrap();
        assert!(a.is_collapsed());
        assert_eq!(a.resolve(&s).unwrap(), 0..0);
    }

    #[test]
    fn unknown_element_is_dangling() {
        let s = doc("abc");
        let a = TextAnchor::span(ElementId::new(9, 1), ElementId::new(9, 2));
        assert!(matches!(a.resolve(&s), Err(AnchorError::Dangling(_))));
    }
}
