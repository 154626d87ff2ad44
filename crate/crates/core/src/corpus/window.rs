use crate::error::{Error, Result};

use super::Document;

pub const DEFAULT_WINDOW_TOKENS: usize = 512;

/// Half-open `[start, end)` bounds of a window of `window` tokens around
/// `position` in a body of `body_len` tokens.
///
/// The window takes `⌊w/2⌋` tokens before the position and `⌈w/2⌉` after,
/// and is shifted (never shrunk) when it would cross a document boundary.
pub fn context_window_bounds(body_len: usize, position: usize, window: usize) -> (usize, usize) {
    if body_len <= window {
        return (0, body_len);
    }
    let before = window / 2;
    let after = window - before;
    let start = position.saturating_sub(before);
    let end = position + after;
    if position < before {
        (0, window)
    } else if end > body_len {
        (body_len - window, body_len)
    } else {
        (start, end)
    }
}

/// Body tokens surrounding the image with 1-based index `img_index`.
pub fn extract_context_window(doc: &Document, img_index: usize, window: usize) -> Result<Vec<String>> {
    if window < 2 {
        return Err(Error::Validation(format!(
            "context window must be at least 2 tokens, got {window}"
        )));
    }
    let image = doc.image(img_index)?;
    let (start, end) = context_window_bounds(doc.body.len(), image.position, window);
    Ok(doc.body[start..end].to_vec())
}
