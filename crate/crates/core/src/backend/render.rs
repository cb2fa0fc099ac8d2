//! Rendering of chat requests into canonical OpenAI-style JSON bodies.
//!
//! The same message sequence always renders to the same bytes, so captured
//! request bodies can be compared verbatim in tests and replays.

use base64::Engine as _;
use serde_json::{json, Value};

use super::{BackendBinding, BackendError, CallParams, ContentPart, Message, Role};
use crate::canonical;
use crate::types::ImageRef;

/// Render `messages` for `binding` as a canonical JSON request body.
///
/// Text-only messages render their content as a plain string; messages with
/// images render an array of typed parts with images inlined as data URLs.
/// Fails without touching the network when the message sequence is malformed
/// or contains images for a non-vision binding.
pub fn render_chat_request(
    binding: &BackendBinding,
    messages: &[Message],
    params: &CallParams,
) -> Result<Vec<u8>, BackendError> {
    validate_messages(binding, messages)?;

    let mut rendered = Vec::with_capacity(messages.len());
    for message in messages {
        let content = if message.has_images() {
            let mut parts = Vec::with_capacity(message.content.len());
            for part in &message.content {
                parts.push(match part {
                    ContentPart::Text(text) => json!({"type": "text", "text": text}),
                    ContentPart::Image(image) => {
                        json!({"type": "image_url", "image_url": {"url": data_url(image)?}})
                    }
                });
            }
            Value::Array(parts)
        } else {
            Value::String(message.text_content())
        };
        rendered.push(json!({"role": message.role.as_str(), "content": content}));
    }

    let body = json!({
        "model": binding.model_id,
        "messages": rendered,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
    });
    canonical::to_canonical_bytes(&body)
        .map_err(|e| BackendError::InvalidRequest(format!("body encoding failed: {e}")))
}

/// Structural checks shared by every transport.
pub(super) fn validate_messages(
    binding: &BackendBinding,
    messages: &[Message],
) -> Result<(), BackendError> {
    if messages.is_empty() {
        return Err(BackendError::InvalidRequest(
            "message sequence is empty".into(),
        ));
    }
    if messages[0].role == Role::Assistant {
        return Err(BackendError::InvalidRequest(
            "message sequence starts with an assistant turn".into(),
        ));
    }
    if !binding.vision && messages.iter().any(Message::has_images) {
        return Err(BackendError::CapabilityMismatch(binding.model_id.clone()));
    }
    Ok(())
}

/// Load an image and inline it as a `data:` URL.
fn data_url(image: &ImageRef) -> Result<String, BackendError> {
    let (media_type, bytes) = image_bytes(image)?;
    Ok(format!(
        "data:{media_type};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

/// Resolve an [`ImageRef`] to its media type and raw bytes.
///
/// Disk images are sniffed by magic number (PNG, JPEG); inline images must
/// already declare a supported media type and carry valid base64.
pub fn image_bytes(image: &ImageRef) -> Result<(String, Vec<u8>), BackendError> {
    match image {
        ImageRef::Path { path } => {
            let bytes = std::fs::read(path)
                .map_err(|e| BackendError::Image(format!("reading '{path}': {e}")))?;
            let media_type = sniff_media_type(&bytes)
                .ok_or_else(|| BackendError::Image(format!("'{path}' is neither PNG nor JPEG")))?;
            Ok((media_type.to_string(), bytes))
        }
        ImageRef::Bytes { media_type, b64 } => {
            if media_type != "image/png" && media_type != "image/jpeg" {
                return Err(BackendError::Image(format!(
                    "unsupported media type '{media_type}'"
                )));
            }
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| BackendError::Image(format!("invalid base64: {e}")))?;
            Ok((media_type.clone(), bytes))
        }
    }
}

fn sniff_media_type(bytes: &[u8]) -> Option<&'static str> {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        Some("image/png")
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        Some("image/jpeg")
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Smallest valid-enough PNG header for sniffing tests.
    const PNG_STUB: &[u8] = &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A, 0x00];

    fn params() -> CallParams {
        CallParams {
            temperature: 0.0,
            max_tokens: 256,
            ..CallParams::default()
        }
    }

    #[test]
    fn text_request_renders_to_sorted_compact_json() {
        let binding = BackendBinding::http("https://h.test/v1", "solver-7b");
        let body = render_chat_request(
            &binding,
            &[Message::system("Be brief."), Message::user("2 + 2?")],
            &params(),
        )
        .unwrap();
        let rendered = String::from_utf8(body).unwrap();
        assert_eq!(
            rendered,
            r#"{"max_tokens":256,"messages":[{"content":"Be brief.","role":"system"},{"content":"2 + 2?","role":"user"}],"model":"solver-7b","temperature":0.0}"#
        );
    }

    #[test]
    fn rendering_is_byte_stable() {
        let binding = BackendBinding::mock("m");
        let messages = vec![
            Message::system("s"),
            Message::user("u"),
            Message::assistant("a"),
            Message::user("u2"),
        ];
        let first = render_chat_request(&binding, &messages, &params()).unwrap();
        for _ in 0..20 {
            assert_eq!(
                render_chat_request(&binding, &messages, &params()).unwrap(),
                first
            );
        }
    }

    #[test]
    fn image_message_renders_parts_with_data_url() {
        let binding = BackendBinding::http("https://h.test/v1", "vlm").with_vision();
        let image = ImageRef::from_bytes("image/png", PNG_STUB);
        let body = render_chat_request(
            &binding,
            &[Message::user_with_images("what is this?", &[image])],
            &params(),
        )
        .unwrap();
        let rendered = String::from_utf8(body).unwrap();

        // Oracle: encode the same bytes independently.
        let expected_b64 = base64::engine::general_purpose::STANDARD.encode(PNG_STUB);
        assert!(rendered.contains(&format!("data:image/png;base64,{expected_b64}")));
        assert!(rendered.contains(r#""type":"image_url""#));
        assert!(rendered.contains(r#""type":"text""#));
    }

    #[test]
    fn images_to_non_vision_binding_fail_before_rendering() {
        let binding = BackendBinding::http("https://h.test/v1", "text-only");
        let image = ImageRef::from_bytes("image/png", PNG_STUB);
        let err = render_chat_request(
            &binding,
            &[Message::user_with_images("look", &[image])],
            &params(),
        )
        .unwrap_err();
        assert!(matches!(err, BackendError::CapabilityMismatch(m) if m == "text-only"));
    }

    #[test]
    fn empty_and_assistant_led_sequences_are_rejected() {
        let binding = BackendBinding::mock("m");
        assert!(matches!(
            render_chat_request(&binding, &[], &params()),
            Err(BackendError::InvalidRequest(_))
        ));
        assert!(matches!(
            render_chat_request(&binding, &[Message::assistant("hi")], &params()),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn sniffing_detects_png_and_jpeg_and_rejects_others() {
        assert_eq!(sniff_media_type(PNG_STUB), Some("image/png"));
        assert_eq!(
            sniff_media_type(&[0xFF, 0xD8, 0xFF, 0xE0, 0x00]),
            Some("image/jpeg")
        );
        assert_eq!(sniff_media_type(b"GIF89a"), None);
    }

    #[test]
    fn path_images_are_read_and_sniffed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.png");
        std::fs::write(&path, PNG_STUB).unwrap();
        let (media, bytes) =
            image_bytes(&ImageRef::path(path.to_string_lossy().to_string())).unwrap();
        assert_eq!(media, "image/png");
        assert_eq!(bytes, PNG_STUB);

        let err = image_bytes(&ImageRef::path("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, BackendError::Image(_)));
    }

    #[test]
    fn inline_images_validate_media_type_and_base64() {
        let good = ImageRef::from_bytes("image/jpeg", &[0xFF, 0xD8, 0xFF]);
        assert!(image_bytes(&good).is_ok());

        let bad_type = ImageRef::from_bytes("image/gif", b"x");
        assert!(matches!(
            image_bytes(&bad_type),
            Err(BackendError::Image(_))
        ));

        let bad_b64 = ImageRef::Bytes {
            media_type: "image/png".into(),
            b64: "not base64 !!!".into(),
        };
        assert!(matches!(image_bytes(&bad_b64), Err(BackendError::Image(_))));
    }
}
