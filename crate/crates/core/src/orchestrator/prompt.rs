use crate::inference::PromptTemplate;
use crate::protocol::ScoredChunk;

pub const NO_CONTEXT: &str = "(no context retrieved)";

/// One `[i] text` line per chunk in rank order. Line breaks inside a chunk
/// are folded to spaces so each chunk stays on its own line.
pub fn context_block(chunks: &[ScoredChunk]) -> String {
    if chunks.is_empty() {
        return NO_CONTEXT.to_string();
    }
    chunks
        .iter()
        .enumerate()
        .map(|(i, sc)| {
            let flat: String = sc
                .chunk
                .text
                .chars()
                .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
                .collect();
            format!("[{}] {}", i + 1, flat)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Substitutes `{context}` and `{query}` in a single pass, so placeholder
/// text inside chunks or the query is never expanded.
pub fn assemble_prompt(query_text: &str, chunks: &[ScoredChunk], template: &PromptTemplate) -> String {
    let context = context_block(chunks);
    let t = template.text();
    let c = t.find("{context}").expect("validated template");
    let q = t.find("{query}").expect("validated template");
    let mut out = String::with_capacity(t.len() + context.len() + query_text.len());
    if c < q {
        out.push_str(&t[..c]);
        out.push_str(&context);
        out.push_str(&t[c + "{context}".len()..q]);
        out.push_str(query_text);
        out.push_str(&t[q + "{query}".len()..]);
    } else {
        out.push_str(&t[..q]);
        out.push_str(query_text);
        out.push_str(&t[q + "{query}".len()..c]);
        out.push_str(&context);
        out.push_str(&t[c + "{context}".len()..]);
    }
    out
}
