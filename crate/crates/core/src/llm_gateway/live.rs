use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, CompletionRequest, GatewayError};

/// Chat-completions over HTTP. `endpoint` is the full URL of the
/// completions route.
pub struct LiveBackend {
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(endpoint: String, api_key: String, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        LiveBackend {
            endpoint,
            api_key,
            agent,
        }
    }

    /// Wire body: messages, JSON mode, and the schema as a response format.
    pub fn request_body(request: &CompletionRequest) -> Value {
        json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "response_format": {
                "type": "json_schema",
                "json_schema": {
                    "name": request.stage().file_stem(),
                    "schema": request.schema.schema_document,
                },
            },
        })
    }
}

fn transport(e: ureq::Error) -> GatewayError {
    match e {
        ureq::Error::Timeout(t) => GatewayError::Timeout(t.to_string()),
        other => GatewayError::Transport(other.to_string()),
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(300).collect()
}

impl Backend for LiveBackend {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let body = Self::request_body(request).to_string();
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(transport)?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(transport)?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Transport(format!("HTTP {status}: {}", excerpt(&text))));
        }
        let reply: Value = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Transport(format!("unreadable response body: {e}")))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Transport(format!("response has no message content: {}", excerpt(&text))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{Message, ModelSettings};
    use crate::prompt_kit::SchemaSpec;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    fn request() -> CompletionRequest {
        CompletionRequest {
            messages: vec![Message::system("sys"), Message::user("hi")],
            schema: SchemaSpec::narrate(),
            temperature: 0.7,
            model_id: ModelSettings::default().model_id,
            max_output_tokens: 64,
        }
    }

    /// Serves one canned HTTP response and returns the request it received.
    fn serve_once(status: &'static str, body: String) -> (String, thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut payload = vec![0; length];
            reader.read_exact(&mut payload).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            head + &String::from_utf8(payload).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn posts_wire_format_and_reads_content() {
        let body = json!({"choices": [{"message": {"role": "assistant", "content": "{\"a\":1}"}}]}).to_string();
        let (url, handle) = serve_once("200 OK", body);
        let backend = LiveBackend::new(url, "sk-test".into(), Duration::from_secs(5));
        assert_eq!(backend.send(&request()).unwrap(), "{\"a\":1}");
        let seen = handle.join().unwrap();
        assert!(seen.starts_with("POST /v1/chat/completions"));
        assert!(seen.to_ascii_lowercase().contains("authorization: bearer sk-test"));
        assert!(seen.contains("\"response_format\""));
        assert!(seen.contains("\"role\":\"user\""));
    }

    #[test]
    fn http_errors_are_transport_errors() {
        let (url, handle) = serve_once("500 Internal Server Error", "{\"error\":\"boom\"}".into());
        let backend = LiveBackend::new(url, "k".into(), Duration::from_secs(5));
        match backend.send(&request()) {
            Err(GatewayError::Transport(msg)) => assert!(msg.contains("500"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        handle.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        drop(listener);
        let backend = LiveBackend::new(url, "k".into(), Duration::from_secs(2));
        assert!(matches!(
            backend.send(&request()),
            Err(GatewayError::Transport(_) | GatewayError::Timeout(_))
        ));
    }

    #[test]
    fn slow_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(800));
            drop(stream);
        });
        let backend = LiveBackend::new(url, "k".into(), Duration::from_millis(200));
        assert!(matches!(backend.send(&request()), Err(GatewayError::Timeout(_))));
        handle.join().unwrap();
    }
}
