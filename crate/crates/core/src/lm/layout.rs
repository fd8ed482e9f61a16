//! Token sequences with image-token slots.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::lm::vocab::{ANS, EOS, IMG_SEP, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageSource {
    Original,
    Reasoned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageSpan {
    pub start: usize,
    pub len: usize,
    pub source: ImageSource,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    #[default]
    ImageFirst,
    PromptFirst,
}

/// Token ids plus the spans that are filled with image tokens instead of
/// text embeddings. Span positions hold `<pad>` placeholders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    tokens: Vec<u32>,
    spans: Vec<ImageSpan>,
    answer: Option<usize>,
}

impl SequenceLayout {
    fn build(order: Ordering, images: &[ImageSource], t: usize, query: &[u32], answer: Option<&[u32]>) -> Self {
        let mut s = Self {
            tokens: Vec::new(),
            spans: Vec::new(),
            answer: None,
        };
        if order == Ordering::PromptFirst {
            s.tokens.extend_from_slice(query);
        }
        for &source in images {
            s.spans.push(ImageSpan {
                start: s.tokens.len(),
                len: t,
                source,
            });
            s.tokens.extend(std::iter::repeat_n(PAD, t));
            s.tokens.push(IMG_SEP);
        }
        if order == Ordering::ImageFirst {
            s.tokens.extend_from_slice(query);
        }
        if let Some(labels) = answer {
            s.answer = Some(s.tokens.len());
            s.tokens.push(ANS);
            s.tokens.extend_from_slice(labels);
        }
        s
    }

    /// First pass: `[IMG_orig][<img_sep>][query]`.
    pub fn pass1(order: Ordering, t: usize, query: &[u32]) -> Self {
        Self::build(order, &[ImageSource::Original], t, query, None)
    }

    /// Second pass: `[IMG_orig][<img_sep>][IMG_reasoned][<img_sep>][query][<ans>][labels]`,
    /// or without the original image span.
    pub fn pass2(order: Ordering, t: usize, query: &[u32], labels: &[u32], with_original: bool) -> Self {
        let images: &[ImageSource] = if with_original {
            &[ImageSource::Original, ImageSource::Reasoned]
        } else {
            &[ImageSource::Reasoned]
        };
        Self::build(order, images, t, query, Some(labels))
    }

    /// Single-image prediction: `[IMG_orig][<img_sep>][query][<ans>][labels]`.
    pub fn single(order: Ordering, t: usize, query: &[u32], labels: &[u32]) -> Self {
        Self::build(order, &[ImageSource::Original], t, query, Some(labels))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn spans(&self) -> &[ImageSpan] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Position of `<ans>`.
    pub fn answer_start(&self) -> Option<usize> {
        self.answer
    }

    pub fn push(&mut self, token: u32) {
        self.tokens.push(token);
    }

    /// Teacher-forced targets: the `<ans>` row predicts the first label, each
    /// label row predicts the next, the last predicts `<eos>`. Returns
    /// `(first row, targets)`.
    pub fn targets(&self) -> Result<(usize, Vec<u32>)> {
        let a = self
            .answer
            .ok_or_else(|| contract("layout has no answer section"))?;
        let mut targets = self.tokens[a + 1..].to_vec();
        targets.push(EOS);
        Ok((a, targets))
    }

    /// The single original-image span (hint source).
    pub fn original_span(&self) -> Result<ImageSpan> {
        let mut it = self.spans.iter().filter(|s| s.source == ImageSource::Original);
        match (it.next(), it.next()) {
            (Some(&s), None) => Ok(s),
            (None, _) => Err(contract("layout has no original image span")),
            _ => Err(contract("layout has more than one original image span")),
        }
    }

    /// Same layout with the label section removed, ending at `<ans>`.
    pub fn prompt(&self) -> Self {
        let mut s = self.clone();
        if let Some(a) = self.answer {
            s.tokens.truncate(a + 1);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_first_templates() {
        let q = [10, 11];
        let p1 = SequenceLayout::pass1(Ordering::ImageFirst, 4, &q);
        assert_eq!(p1.tokens(), &[PAD, PAD, PAD, PAD, IMG_SEP, 10, 11]);
        let p2 = SequenceLayout::pass2(Ordering::ImageFirst, 2, &q, &[20], true);
        assert_eq!(p2.tokens(), &[PAD, PAD, IMG_SEP, PAD, PAD, IMG_SEP, 10, 11, ANS, 20]);
        assert_eq!(p2.spans()[1].start, 3);
        assert_eq!(p2.spans()[1].source, ImageSource::Reasoned);
        assert_eq!(p2.targets().unwrap(), (8, vec![20, EOS]));
        assert_eq!(p2.prompt().tokens().last(), Some(&ANS));
    }

    #[test]
    fn prompt_first_moves_query_to_front() {
        let p2 = SequenceLayout::pass2(Ordering::PromptFirst, 2, &[10, 11], &[20], true);
        assert_eq!(p2.tokens(), &[10, 11, PAD, PAD, IMG_SEP, PAD, PAD, IMG_SEP, ANS, 20]);
        assert_eq!(p2.spans()[0].start, 2);
    }

    #[test]
    fn no_original_variant_has_one_reasoned_span() {
        let p2 = SequenceLayout::pass2(Ordering::ImageFirst, 4, &[10], &[20], false);
        assert_eq!(p2.spans().len(), 1);
        assert_eq!(p2.spans()[0].source, ImageSource::Reasoned);
        assert!(p2.original_span().is_err());
    }

    #[test]
    fn original_span_lookup() {
        let p1 = SequenceLayout::pass1(Ordering::PromptFirst, 4, &[9; 5]);
        assert_eq!(
            p1.original_span().unwrap(),
            ImageSpan {
                start: 5,
                len: 4,
                source: ImageSource::Original
            }
        );
    }
}
